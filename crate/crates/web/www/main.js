import init, { solve, feasibility, clf } from "./pkg/oclab_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
let x0 = [1.0, 0.5];

function call(fn, params, info) {
  try {
    info.classList.remove("error");
    return JSON.parse(fn(JSON.stringify(params)));
  } catch (e) {
    info.textContent = String(e);
    info.classList.add("error");
    return null;
  }
}

// Blue (low) to yellow (high) ramp.
function ramp(t) {
  t = Math.min(1, Math.max(0, t));
  const r = Math.round(40 + 215 * t), g = Math.round(60 + 170 * t), b = Math.round(160 - 120 * t);
  return `rgb(${r},${g},${b})`;
}

function boxMap(canvas, lo, hi) {
  const w = canvas.width, h = canvas.height;
  return {
    px: (x) => ((x - lo) / (hi - lo)) * w,
    py: (y) => h - ((y - lo) / (hi - lo)) * h,
    inv: (px, py) => [lo + (px / w) * (hi - lo), lo + ((h - py) / h) * (hi - lo)],
  };
}

function ellipse(ctx, m, p, level) {
  // Points with xᵀPx = level along rays.
  ctx.beginPath();
  for (let i = 0; i <= 120; i++) {
    const th = (2 * Math.PI * i) / 120, c = Math.cos(th), s = Math.sin(th);
    const q = p[0] * c * c + (p[1] + p[2]) * c * s + p[3] * s * s;
    const r = Math.sqrt(level / q);
    const [X, Y] = [m.px(r * c), m.py(r * s)];
    i === 0 ? ctx.moveTo(X, Y) : ctx.lineTo(X, Y);
  }
  ctx.stroke();
}

function runSolve() {
  const info = $("s-info");
  const out = call(solve, {
    practical: $("s-variant").value === "practical",
    lambda_fraction: num("s-lambda"),
    delta: num("s-delta"),
    sigma_sq: num("s-sigma"),
    nodes: num("s-nodes"),
    controls: num("s-controls"),
    x0,
  }, info);
  if (!out) return;

  const cv = $("s-map"), ctx = cv.getContext("2d");
  const [nx, ny] = out.counts, m = boxMap(cv, out.lo[0], out.hi[0]);
  const vmax = Math.max(...out.values.filter(Number.isFinite));
  const cw = cv.width / nx, ch = cv.height / ny;
  for (let j = 0; j < ny; j++) {
    for (let i = 0; i < nx; i++) {
      ctx.fillStyle = ramp(Math.sqrt(out.values[i * ny + j] / vmax));
      ctx.fillRect(i * cw, cv.height - (j + 1) * ch, cw + 1, ch + 1);
    }
  }
  ctx.strokeStyle = "#fff";
  ctx.setLineDash([5, 4]);
  ellipse(ctx, m, out.p, out.c);
  ctx.setLineDash([]);
  ctx.strokeStyle = "#d62728";
  ctx.lineWidth = 2;
  ctx.beginPath();
  out.states.forEach(([a, b], k) => (k === 0 ? ctx.moveTo(m.px(a), m.py(b)) : ctx.lineTo(m.px(a), m.py(b))));
  ctx.stroke();
  ctx.lineWidth = 1;

  const dv = $("s-decay"), d = dv.getContext("2d");
  d.clearRect(0, 0, dv.width, dv.height);
  const series = [
    { ys: out.rollout_values, color: "#1f77b4", dash: [] },
    { ys: out.value_envelope, color: "#d62728", dash: [6, 4] },
  ];
  const pos = series.flatMap((s) => s.ys).filter((v) => v > 0);
  const [lmin, lmax] = [Math.log10(Math.min(...pos)), Math.log10(Math.max(...pos))];
  const K = out.rollout_values.length - 1;
  for (const s of series) {
    d.strokeStyle = s.color;
    d.setLineDash(s.dash);
    d.beginPath();
    let open = false;
    s.ys.forEach((v, k) => {
      if (!(v > 0)) { open = false; return; }
      const X = 30 + (k / K) * (dv.width - 40);
      const Y = 10 + (1 - (Math.log10(v) - lmin) / (lmax - lmin || 1)) * (dv.height - 40);
      open ? d.lineTo(X, Y) : d.moveTo(X, Y);
      open = true;
    });
    d.stroke();
  }
  d.setLineDash([]);
  d.fillStyle = "#222";
  d.fillText("J(x_k) and its envelope (log scale) vs k", 30, dv.height - 10);

  info.textContent = [
    `variant        ${out.variant}`,
    `alpha          ${out.alpha.toFixed(4)}`,
    `lambda         ${out.lambda.toFixed(4)}`,
    `iterations     ${out.iterations} (${out.converged ? "converged" : "not converged"})`,
    `Omega_c level  ${out.c.toFixed(4)}`,
    `J bounds       ${out.value_lower_coeff.toExponential(3)}|x|² .. ${out.value_upper_coeff.toExponential(3)}|x|²`,
    `decay / step   ${out.value_decay.toFixed(5)}${out.feasible ? "" : "  (infeasible)"}`,
    `x0             (${x0[0].toFixed(2)}, ${x0[1].toFixed(2)})`,
  ].join("\n");
}

function runFeasibility() {
  const info = $("f-info");
  const out = call(feasibility, {
    delta: num("f-delta"),
    w_u: num("f-wu"),
    log10_sigma_sq: [num("f-lo"), num("f-hi")],
    lambda_fractions: 20,
    sigma_steps: 40,
  }, info);
  if (!out) return;
  const cv = $("f-map"), ctx = cv.getContext("2d");
  const ni = out.lambda_fraction.length, nj = out.sigma_sq.length;
  const cw = cv.width / nj, ch = cv.height / ni;
  let feasible = 0;
  for (let i = 0; i < ni; i++) {
    for (let j = 0; j < nj; j++) {
      const q = out.q[i][j];
      if (q < 1) feasible++;
      ctx.fillStyle = q < 1 ? `rgb(40,90,${Math.min(255, Math.round(150 + 2000 * (1 - q)))})` : `rgb(${Math.round(200 + 55 * Math.min(1, q - 1))},200,190)`;
      ctx.fillRect(j * cw, cv.height - (i + 1) * ch, cw + 1, ch + 1);
    }
  }
  info.textContent = [
    `c_bar        ${out.c_bar.toFixed(4)}`,
    `alpha        ${out.alpha.toFixed(4)}`,
    `rows         lambda/alpha ${out.lambda_fraction[0]} .. 1 (bottom to top)`,
    `columns      sigma^2 ${out.sigma_sq[0].toPrecision(3)} .. ${out.sigma_sq[nj - 1].toPrecision(3)} (log)`,
    `feasible     ${feasible} of ${ni * nj} cells`,
  ].join("\n");
}

function runClf() {
  const info = $("c-info");
  const out = call(clf, {
    q: [num("c-q1"), num("c-q2")],
    r: num("c-r"),
    h: $("c-kind").value === "dt" ? 0.1 : null,
  }, info);
  if (!out) return;
  const cv = $("c-map"), ctx = cv.getContext("2d");
  ctx.clearRect(0, 0, cv.width, cv.height);
  const m = boxMap(cv, -2, 2);
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.moveTo(m.px(-2), m.py(0)); ctx.lineTo(m.px(2), m.py(0));
  ctx.moveTo(m.px(0), m.py(-2)); ctx.lineTo(m.px(0), m.py(2));
  ctx.stroke();
  [0.5, 1, 2, 4].forEach((lvl, i) => {
    ctx.strokeStyle = ramp(i / 3);
    ellipse(ctx, m, out.p, lvl);
  });
  const f = (v) => v.toFixed(5);
  info.textContent = [
    `P      [[${f(out.p[0])}, ${f(out.p[1])}],`,
    `        [${f(out.p[2])}, ${f(out.p[3])}]]`,
    `K      [${f(out.gain[0])}, ${f(out.gain[1])}]`,
    `c1 c2  ${f(out.c1)} ${f(out.c2)}`,
    `alpha  ${f(out.alpha_linear)} linear, ${f(out.alpha_certified)} certified on |x| <= 2`,
    `Riccati residual ${out.riccati_residual.toExponential(2)}`,
    `sampled violations ${out.violations}`,
    `level sets V = 0.5, 1, 2, 4`,
  ].join("\n");
}

await init();
$("s-run").onclick = runSolve;
$("f-run").onclick = runFeasibility;
$("c-run").onclick = runClf;
$("s-map").onclick = (ev) => {
  const cv = $("s-map"), r = cv.getBoundingClientRect();
  x0 = boxMap(cv, -2, 2).inv(ev.clientX - r.left, ev.clientY - r.top);
  runSolve();
};
runSolve();
runFeasibility();
runClf();
