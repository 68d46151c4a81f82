import init, { influenceMap, lambdaScatter, attackCurves } from "./pkg/sgc_influence_web.js";

const canvas = document.getElementById("canvas");
const ctx = canvas.getContext("2d");
const status = document.getElementById("status");
const legend = document.getElementById("legend");
const PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

function scene() {
  const num = (id) => Number(document.getElementById(id).value);
  return {
    seed: num("seed"), nodes_per_block: num("nodes_per_block"), p_in: num("p_in"),
    p_out: num("p_out"), noise_rate: num("noise_rate"), k: num("k"), lambda: num("lambda"),
  };
}

function run(label, fn, draw) {
  status.className = "";
  status.textContent = `${label}…`;
  // let the status repaint before the synchronous wasm call
  setTimeout(() => {
    const t0 = performance.now();
    try {
      draw(JSON.parse(fn()));
      status.textContent = `${label}: ${(performance.now() - t0).toFixed(0)} ms`;
    } catch (e) {
      status.className = "error";
      status.textContent = String(e);
    }
  }, 10);
}

function clear() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
}

// Two clusters on circles, one per label, with a short relaxation pass.
function layout(nodes, edges) {
  const w = canvas.width, h = canvas.height;
  const byLabel = {};
  nodes.forEach((n, i) => (byLabel[n.label] ??= []).push(i));
  const pos = nodes.map(() => [0, 0]);
  const groups = Object.values(byLabel);
  groups.forEach((members, g) => {
    const cx = w * (g + 1) / (groups.length + 1), cy = h / 2, r = Math.min(w / (2.6 * groups.length), h / 2.4);
    members.forEach((v, j) => {
      const a = 2 * Math.PI * j / members.length;
      pos[v] = [cx + r * Math.cos(a), cy + r * Math.sin(a)];
    });
  });
  for (let it = 0; it < 60; it++) {
    for (const e of edges) {
      if (e.planted) continue;
      const p = pos[e.a], q = pos[e.b];
      const dx = (q[0] - p[0]) * 0.01, dy = (q[1] - p[1]) * 0.01;
      p[0] += dx; p[1] += dy; q[0] -= dx; q[1] -= dy;
    }
  }
  return pos;
}

function drawMap(out) {
  clear();
  const pos = layout(out.nodes, out.edges);
  const scale = Math.max(...out.edges.map((e) => Math.abs(e.influence)), 1e-12);
  for (const e of out.edges) {
    const t = Math.abs(e.influence) / scale;
    ctx.strokeStyle = e.influence < 0 ? `rgba(0,140,0,${0.15 + 0.85 * t})` : `rgba(200,0,0,${0.15 + 0.85 * t})`;
    ctx.lineWidth = 0.5 + 3 * t;
    ctx.setLineDash(e.planted ? [4, 3] : []);
    ctx.beginPath();
    ctx.moveTo(...pos[e.a]);
    ctx.lineTo(...pos[e.b]);
    ctx.stroke();
  }
  ctx.setLineDash([]);
  out.nodes.forEach((n, v) => {
    ctx.fillStyle = PALETTE[n.label % PALETTE.length];
    ctx.beginPath();
    ctx.arc(...pos[v], n.role === "train" ? 6 : 4, 0, 2 * Math.PI);
    ctx.fill();
    if (n.role === "train") { ctx.strokeStyle = "#000"; ctx.lineWidth = 1; ctx.stroke(); }
  });
  const planted = out.edges.filter((e) => e.planted);
  const helpful = planted.filter((e) => e.influence < 0).length;
  legend.innerHTML =
    `<span style="color:#080">green: removal lowers val loss</span>` +
    `<span style="color:#c00">red: removal raises it</span><span>dashed: planted</span>` +
    `<span>${helpful}/${planted.length} planted edges flagged for removal</span>` +
    `<span>val acc ${out.val_accuracy.toFixed(3)}, test acc ${out.test_accuracy.toFixed(3)}</span>`;
}

function axes(x0, y0, x1, y1, xlabel, ylabel) {
  const pad = 50, w = canvas.width - 2 * pad, h = canvas.height - 2 * pad;
  const sx = (x) => pad + (x - x0) / (x1 - x0 || 1) * w;
  const sy = (y) => canvas.height - pad - (y - y0) / (y1 - y0 || 1) * h;
  ctx.strokeStyle = "#444"; ctx.lineWidth = 1; ctx.fillStyle = "#444";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillText(xlabel, pad + w / 2 - 30, canvas.height - 15);
  ctx.save(); ctx.translate(15, pad + h / 2 + 30); ctx.rotate(-Math.PI / 2); ctx.fillText(ylabel, 0, 0); ctx.restore();
  ctx.fillText(x0.toPrecision(2), pad, canvas.height - pad + 14);
  ctx.fillText(x1.toPrecision(2), pad + w - 30, canvas.height - pad + 14);
  ctx.fillText(y0.toPrecision(2), 5, canvas.height - pad);
  ctx.fillText(y1.toPrecision(2), 5, pad + 8);
  return [sx, sy];
}

function drawScatter(series) {
  clear();
  const pts = series.flatMap((s) => s.points);
  const vals = pts.flatMap((p) => [p.estimated, p.actual]);
  const lo = Math.min(...vals), hi = Math.max(...vals);
  const [sx, sy] = axes(lo, lo, hi, hi, "estimated Δ val loss", "retrained Δ val loss");
  ctx.strokeStyle = "#bbb"; ctx.beginPath(); ctx.moveTo(sx(lo), sy(lo)); ctx.lineTo(sx(hi), sy(hi)); ctx.stroke();
  legend.innerHTML = "";
  series.forEach((s, i) => {
    const c = PALETTE[i % PALETTE.length];
    ctx.fillStyle = c;
    for (const p of s.points) ctx.fillRect(sx(p.estimated) - 2.5, sy(p.actual) - 2.5, 5, 5);
    const rho = s.error ? s.error : s.rho == null ? "n/a" : s.rho.toFixed(3);
    legend.innerHTML += `<span style="color:${c}">λ=${s.lambda}: ρ=${rho}</span>`;
  });
}

function drawCurves(curves) {
  clear();
  const n = Math.max(...curves.map((c) => c.test_accuracy.length)) - 1;
  const ys = curves.flatMap((c) => c.test_accuracy);
  const [sx, sy] = axes(0, Math.min(...ys) - 0.01, Math.max(n, 1), Math.max(...ys) + 0.01, "removals", "test accuracy");
  legend.innerHTML = "";
  curves.forEach((c, i) => {
    const col = PALETTE[i % PALETTE.length];
    ctx.strokeStyle = col; ctx.lineWidth = 2;
    ctx.beginPath();
    c.test_accuracy.forEach((y, x) => (x ? ctx.lineTo(sx(x), sy(y)) : ctx.moveTo(sx(x), sy(y))));
    ctx.stroke();
    const drop = c.test_accuracy[0] - c.test_accuracy[c.test_accuracy.length - 1];
    legend.innerHTML += `<span style="color:${col}">${c.baseline}: drop ${drop.toFixed(3)}</span>`;
  });
}

await init();
document.getElementById("map").onclick = () =>
  run("influence map", () => influenceMap(JSON.stringify(scene())), drawMap);
document.getElementById("sweep").onclick = () =>
  run("λ sweep", () => lambdaScatter(JSON.stringify({ ...scene(), lambdas: [1e-1, 1e-2, 1e-3], edges: 30 })), drawScatter);
document.getElementById("attack").onclick = () =>
  run("attack", () => attackCurves(JSON.stringify({
    ...scene(), kind: document.getElementById("kind").value, count: Number(document.getElementById("count").value),
  })), drawCurves);
document.getElementById("map").click();
