/* tslint:disable */
/* eslint-disable */

/**
 * `R_FLOPs(E)` for a target of `target` FLOPs, against the ratio `E / F`
 * sampled in `[lo, hi]`.
 */
export function flops_regularizer_curve(target: number, epsilon: number, lo: number, hi: number, points: number): Float64Array;

/**
 * `H_T(alpha)` sampled at `points` evenly spaced alphas in `[lo, hi]`.
 */
export function indicator_curve(temperature: number, lo: number, hi: number, points: number): Float64Array;

/**
 * Samples `count` width assignments of a CIFAR-shaped ResNet from the
 * `random` or `constrained` space; returns JSON.
 */
export function sample_design_space(kind: string, depth: number, count: number, seed: number): string;

/**
 * Temperature at epochs `0..=n_max` for a schedule name
 * (`linear`, `cosine`, `smallT`, `fixed`).
 */
export function temperature_schedule(kind: string, t0: number, n_max: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly flops_regularizer_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly indicator_curve: (a: number, b: number, c: number, d: number) => [number, number];
    readonly sample_design_space: (a: number, b: number, c: number, d: number, e: number) => [number, number];
    readonly temperature_schedule: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
