import init, {
  indicator_curve,
  temperature_schedule,
  flops_regularizer_curve,
  sample_design_space,
} from "./pkg/anneal_prune_demo.js";

const $ = (id) => document.getElementById(id);

// Minimal line/scatter plotting on a canvas.
function plot(canvas, series, { xmin, xmax, ymin, ymax, xlabel = "", ylabel = "", vlines = [] }) {
  const ctx = canvas.getContext("2d");
  const W = canvas.width, H = canvas.height, pad = 34;
  const sx = (x) => pad + ((x - xmin) / (xmax - xmin)) * (W - 2 * pad);
  const sy = (y) => H - pad - ((y - ymin) / (ymax - ymin)) * (H - 2 * pad);
  ctx.clearRect(0, 0, W, H);
  ctx.strokeStyle = "#999";
  ctx.lineWidth = 1;
  ctx.strokeRect(pad, pad, W - 2 * pad, H - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.font = "11px system-ui";
  ctx.fillText(xmin.toPrecision(3), pad, H - pad + 14);
  ctx.fillText(xmax.toPrecision(3), W - pad - 24, H - pad + 14);
  ctx.fillText(ymax.toPrecision(3), 2, pad + 4);
  ctx.fillText(ymin.toPrecision(3), 2, H - pad);
  ctx.fillText(xlabel, W / 2 - 20, H - 6);
  ctx.fillText(ylabel, pad + 4, pad - 8);
  for (const x of vlines) {
    ctx.strokeStyle = "#ccc";
    ctx.setLineDash([4, 3]);
    ctx.beginPath();
    ctx.moveTo(sx(x), pad);
    ctx.lineTo(sx(x), H - pad);
    ctx.stroke();
    ctx.setLineDash([]);
  }
  for (const s of series) {
    ctx.strokeStyle = ctx.fillStyle = s.color || "#1f6fb2";
    ctx.lineWidth = 2;
    if (s.points) {
      for (const [x, y] of s.xy) {
        ctx.beginPath();
        ctx.arc(sx(x), sy(y), 3, 0, 2 * Math.PI);
        ctx.fill();
      }
    } else {
      ctx.beginPath();
      s.xy.forEach(([x, y], i) => (i ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y))));
      ctx.stroke();
    }
  }
}

const zip = (xs, ys) => xs.map((x, i) => [x, ys[i]]);
const grid = (lo, hi, n) => Array.from({ length: n }, (_, i) => lo + ((hi - lo) * i) / (n - 1));

function drawIndicator() {
  const nmax = +$("nmax").value;
  $("epoch").max = nmax;
  const epoch = Math.min(+$("epoch").value, nmax);
  const temps = Array.from(temperature_schedule($("sched").value, 1.0, nmax));
  const t = temps[epoch];
  $("nmax-v").textContent = nmax;
  $("epoch-v").textContent = epoch;
  $("temp-v").textContent = t === undefined ? "-" : t.toFixed(4);
  if (t === undefined) return;
  const n = 201;
  const xs = grid(-3, 3, n);
  plot($("curve"), [
    { xy: zip(xs, Array.from(indicator_curve(1.0, -3, 3, n))), color: "#bbb" },
    { xy: zip(xs, Array.from(indicator_curve(t, -3, 3, n))) },
  ], { xmin: -3, xmax: 3, ymin: 0, ymax: 1, xlabel: "alpha", ylabel: "H_T(alpha)  (grey: T = 1)", vlines: [0] });
  plot($("sched-plot"), [
    { xy: temps.map((v, i) => [i, v]) },
    { xy: [[epoch, t]], points: true, color: "#c33" },
  ], { xmin: 0, xmax: nmax, ymin: 0, ymax: 1, xlabel: "epoch", ylabel: "T(n)" });
}

function drawRegularizer() {
  const eps = +$("eps").value;
  $("eps-v").textContent = eps.toFixed(2);
  const n = 301, lo = 0.3, hi = 2.5;
  const target = +$("target").value;
  const ys = Array.from(flops_regularizer_curve(target, eps, lo, hi, n));
  if (!ys.length) return;
  plot($("reg"), [{ xy: zip(grid(lo, hi, n), ys) }], {
    xmin: lo, xmax: hi, ymin: Math.min(...ys), ymax: Math.max(...ys),
    xlabel: "E_FLOPs / F", ylabel: "R_FLOPs", vlines: [1 - eps, 1],
  });
}

function drawSpace() {
  $("count-v").textContent = $("count").value;
  const res = JSON.parse(sample_design_space($("space").value, +$("depth").value, +$("count").value, +$("seed").value >>> 0));
  if (res.error) {
    $("space-table").textContent = res.error;
    return;
  }
  const inst = res.instances;
  plot($("space-plot"), [{ xy: inst.map((r) => [r.id, r.flops_ratio]), points: true }], {
    xmin: 0, xmax: Math.max(1, inst.length - 1), ymin: 0, ymax: 1,
    xlabel: "instance", ylabel: "FLOPs / unpruned",
  });
  const head = "<tr><th>id</th><th>FLOPs ratio</th><th>R_sym</th><th>widths</th></tr>";
  const rows = inst.slice(0, 12).map((r) =>
    `<tr><td>${r.id}</td><td>${r.flops_ratio.toFixed(3)}</td><td>${r.symmetry.toFixed(1)}</td>` +
    `<td style="text-align:left">${r.widths.join(" ")}</td></tr>`).join("");
  $("space-table").innerHTML = `<p>${res.model}, ${res.base_flops.toLocaleString()} FLOPs unpruned; first 12 instances:</p><table>${head}${rows}</table>`;
}

async function main() {
  try {
    await init();
  } catch (e) {
    $("status").textContent = "Could not load pkg/anneal_prune_demo.js - build it first (see README).";
    return;
  }
  $("status").textContent = "";
  for (const id of ["sched", "nmax", "epoch"]) $(id).addEventListener("input", drawIndicator);
  for (const id of ["eps", "target"]) $(id).addEventListener("input", drawRegularizer);
  for (const id of ["space", "depth", "count", "seed"]) $(id).addEventListener("input", drawSpace);
  drawIndicator();
  drawRegularizer();
  drawSpace();
}

main();
