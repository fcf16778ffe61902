import init, { densities, estimator_lab_json, Session } from "./pkg/rpo_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function plot(canvas, series, opts = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 36;
  ctx.clearRect(0, 0, w, h);
  const xs = series.flatMap((s) => s.x);
  const ys = series.flatMap((s) => s.y).filter(Number.isFinite);
  if (!xs.length || !ys.length) return;
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = [opts.y0 ?? Math.min(...ys), opts.y1 ?? Math.max(...ys)];
  if (y1 === y0) y1 = y0 + 1;
  const sx = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.fillText(y1.toPrecision(3), 2, pad + 4);
  ctx.fillText(y0.toPrecision(3), 2, h - pad);
  ctx.fillText(x0.toPrecision(3), pad, h - pad + 14);
  ctx.fillText(x1.toPrecision(3), w - pad - 30, h - pad + 14);
  if (opts.band) {
    ctx.fillStyle = "rgba(80,160,80,0.12)";
    const top = sy(Math.min(opts.band[1], y1));
    const bottom = sy(Math.max(opts.band[0], y0));
    ctx.fillRect(pad, top, w - 2 * pad, bottom - top);
  }
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    let started = false;
    s.x.forEach((x, i) => {
      const y = s.y[i];
      if (!Number.isFinite(y)) return;
      const clamped = Math.max(y0, Math.min(y1, y));
      started ? ctx.lineTo(sx(x), sy(clamped)) : ctx.moveTo(sx(x), sy(clamped));
      started = true;
    });
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, w - pad - 160, pad + 14 + 14 * k);
  });
}

function updateDensity() {
  const cLow = num("c-low");
  const cHigh = num("c-high");
  const v = JSON.parse(densities(num("mu-old"), num("ls-old"), num("mu-new"), num("ls-new"), cLow, cHigh, 400));
  const peak = Math.max(...v.old_density, ...v.new_density);
  plot($("density"), [
    { x: v.actions, y: v.old_density.map((d) => d / peak), color: "#1f77b4", label: "old density (scaled)" },
    { x: v.actions, y: v.new_density.map((d) => d / peak), color: "#d62728", label: "new density (scaled)" },
    { x: v.actions, y: v.ratio.map((r) => r / 3), color: "#2ca02c", label: "ratio / 3 (gate shaded)" },
  ], { y0: 0, y1: 1, band: [(1 - cLow) / 3, (1 + cHigh) / 3] });
  $("density-out").textContent =
    `KL(old‖new) = ${v.kl.toExponential(3)}    old mass inside gate = ${(100 * v.gated_mass).toFixed(2)}%`;
}

function runLab() {
  const report = JSON.parse(estimator_lab_json($("lab-env").value, num("lab-samples"), num("lab-seed"), num("lab-pert")));
  const names = ["w_μ", "w_σ", "b_μ", "b_σ"];
  let html = `<p>ρ ∈ [${report.ratio_min.toFixed(3)}, ${report.ratio_max.toFixed(3)}]</p><table><tr><th>estimator</th><th>param</th><th>mean</th><th>truth</th><th>SE</th><th>dev / SE</th><th>variance</th></tr>`;
  for (const e of report.estimators) {
    e.mean.forEach((m, k) => {
      html += `<tr><td>${k ? "" : e.name}</td><td>${names[k]}</td><td>${m.toExponential(4)}</td><td>${e.truth[k].toExponential(4)}</td>` +
        `<td>${e.std_error[k].toExponential(2)}</td><td>${e.deviation_se[k].toFixed(2)}</td><td>${e.variance[k].toExponential(2)}</td></tr>`;
    });
  }
  $("lab-out").innerHTML = html + "</table>";
}

let running = null;

function startTraining() {
  if (running) running.stop = true;
  const session = new Session($("tr-kind").value, $("tr-env").value, num("tr-epochs"), num("tr-seed"));
  const state = { stop: false, points: [] };
  running = state;
  const total = num("tr-iters");
  const tick = () => {
    if (state.stop || state.points.length >= total) {
      session.free();
      return;
    }
    const p = JSON.parse(session.step());
    state.points.push(p);
    const x = state.points.map((q) => q.env_steps);
    plot($("curve"), [
      { x, y: state.points.map((q) => q.eval_return), color: "#1f77b4", label: "deterministic eval" },
      { x, y: state.points.map((q) => q.train_return ?? NaN), color: "#ff7f0e", label: "training episodes" },
    ]);
    $("tr-out").textContent =
      `iteration ${p.iteration}  steps ${p.env_steps}  eval ${p.eval_return.toFixed(3)}  KL ${p.kl_mean.toExponential(2)}  clipped ${(100 * p.clip_fraction).toFixed(1)}%`;
    setTimeout(tick, 0);
  };
  tick();
}

await init();
$("status").textContent = "ready";
for (const id of ["mu-old", "ls-old", "mu-new", "ls-new", "c-low", "c-high"]) $(id).addEventListener("input", updateDensity);
$("lab-run").addEventListener("click", () => {
  $("lab-out").textContent = "running…";
  setTimeout(() => {
    try { runLab(); } catch (e) { $("lab-out").textContent = String(e); }
  }, 0);
});
$("tr-start").addEventListener("click", () => {
  try { startTraining(); } catch (e) { $("tr-out").textContent = String(e); }
});
$("tr-stop").addEventListener("click", () => { if (running) running.stop = true; });
updateDensity();
