/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const flops_regularizer_curve: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const indicator_curve: (a: number, b: number, c: number, d: number) => [number, number];
export const sample_design_space: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const temperature_schedule: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
