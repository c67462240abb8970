import init, { Demo } from "./pkg/prodg_web.js";

const $ = (id) => document.getElementById(id);
let demo;
const purityLog = [];

function fillChannels(select, n, chosen) {
  for (let c = 0; c < n; c++) select.add(new Option(`${c}`, c, false, c === chosen));
}

function drawHeatmap() {
  const concept = +$("hm-concept").value;
  const [r0, r1, c0, c1] = ["hm-r0", "hm-r1", "hm-c0", "hm-c1"].map((id) => +$(id).value);
  const threshold = +$("hm-threshold").value;
  $("hm-threshold-value").textContent = threshold.toFixed(2);
  let view;
  try {
    view = JSON.parse(demo.heatmap(concept, r0, r1, c0, c1, threshold, $("hm-eight").checked));
  } catch (e) {
    $("hm-info").textContent = String(e);
    return;
  }
  const n = view.size;
  const scale = $("hm-image").width / n;

  const img = new ImageData(new Uint8ClampedArray(view.rgba), n, n);
  const tmp = new OffscreenCanvas(n, n);
  tmp.getContext("2d").putImageData(img, 0, 0);
  const ctx = $("hm-image").getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, n * scale, n * scale);

  const heat = $("hm-heat").getContext("2d");
  view.upsampled.forEach((v, k) => {
    const g = Math.round(v * 255);
    heat.fillStyle = `rgb(${g},${g},${g})`;
    heat.fillRect((k % n) * scale, Math.floor(k / n) * scale, scale, scale);
  });

  for (const c of [ctx, heat]) {
    if (!view.bbox) continue;
    const b = view.bbox;
    c.strokeStyle = "#e33";
    c.lineWidth = 3;
    c.strokeRect(b.col_min * scale, b.row_min * scale, (b.col_max - b.col_min + 1) * scale, (b.row_max - b.row_min + 1) * scale);
  }
  $("hm-info").textContent = `purity ${view.purity.toFixed(4)}  box ${view.bbox ? JSON.stringify(view.bbox) : "none"}`;
}

function plot(canvas, series, colors, xs) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  ctx.clearRect(0, 0, w, h);
  const all = series.flat();
  const lo = Math.min(0, ...all), hi = Math.max(1, ...all);
  const y = (v) => h - 10 - ((v - lo) / (hi - lo)) * (h - 20);
  ctx.strokeStyle = "#ccc";
  ctx.beginPath();
  ctx.moveTo(0, y(0)); ctx.lineTo(w, y(0));
  ctx.moveTo(0, y(1)); ctx.lineTo(w, y(1));
  ctx.stroke();
  series.forEach((s, k) => {
    ctx.strokeStyle = colors[k];
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.forEach((v, i) => {
      const x = (xs ? xs[i] : i / Math.max(1, s.length - 1)) * (w - 1);
      i ? ctx.lineTo(x, y(v)) : ctx.moveTo(x, y(v));
    });
    ctx.stroke();
  });
}

function drawSweep() {
  const i = +$("sw-i").value, j = +$("sw-j").value;
  if (i === j) return;
  const pts = JSON.parse(demo.sweep(i, j, 65));
  const xs = pts.map((p) => p.angle / (Math.PI / 2));
  plot($("sw-plot"), [pts.map((p) => p.purity_first), pts.map((p) => p.purity_second)], ["#1f77b4", "#ff7f0e"], xs);
}

function runTraining() {
  const metrics = JSON.parse(demo.train(20));
  for (const m of metrics) purityLog.push(m.mean_purity);
  $("tr-step").textContent = `step ${demo.step}, last purity ${purityLog.at(-1).toFixed(4)}`;
  plot($("tr-plot"), [purityLog], ["#2ca02c"]);
  drawHeatmap();
  drawSweep();
}

async function main() {
  await init();
  demo = new Demo(0);
  fillChannels($("hm-concept"), demo.concepts, 0);
  fillChannels($("sw-i"), demo.concepts, 0);
  fillChannels($("sw-j"), demo.concepts, 1);
  for (const id of ["hm-concept", "hm-r0", "hm-r1", "hm-c0", "hm-c1", "hm-threshold", "hm-eight"]) $(id).addEventListener("input", drawHeatmap);
  for (const id of ["sw-i", "sw-j"]) $(id).addEventListener("input", drawSweep);
  $("tr-run").addEventListener("click", runTraining);
  $("status").textContent = "";
  drawHeatmap();
  drawSweep();
}

main().catch((e) => { $("status").textContent = String(e); });
