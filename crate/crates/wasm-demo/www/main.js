import init, { gp_field, toy_weight_map, pg_histogram } from "./pkg/bsps_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// blue (low) to white to red (high)
function diverging(t) {
  t = Math.max(-1, Math.min(1, t));
  if (t < 0) {
    const a = 1 + t;
    return [Math.round(40 + 215 * a), Math.round(90 + 165 * a), 255];
  }
  return [255, Math.round(255 - 165 * t), Math.round(255 - 215 * t)];
}

function heatmap(canvas, values, n, scale) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(n, n);
  for (let k = 0; k < n * n; k++) {
    const [r, g, b] = diverging(values[k] / scale);
    img.data.set([r, g, b, 255], 4 * k);
  }
  const tmp = document.createElement("canvas");
  tmp.width = n;
  tmp.height = n;
  tmp.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function drawField() {
  const n = num("gp-n");
  try {
    const f = gp_field(num("gp-range"), 1.0, n, BigInt(num("gp-seed")));
    heatmap($("gp-canvas"), f, n, 2.5);
    $("gp-status").textContent = `${n * n} sites, min ${Math.min(...f).toFixed(2)}, max ${Math.max(...f).toFixed(2)}`;
  } catch (e) {
    $("gp-status").textContent = String(e);
  }
}

function drawWeights() {
  const n = 40;
  const nTrain = num("vb-n");
  $("vb-status").textContent = "fitting...";
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const out = toy_weight_map(nTrain, n, BigInt(num("vb-seed")));
      const ms = performance.now() - t0;
      const cells = n * n;
      for (const j of [0, 1]) {
        const canvas = $(`vb-canvas-${j + 1}`);
        heatmap(canvas, out.subarray(j * cells, (j + 1) * cells), n, 1.2);
        const ctx = canvas.getContext("2d");
        ctx.fillStyle = "#222";
        for (let i = 2 * cells; i < out.length; i += 2) {
          const x = ((out[i] + 1) / 2) * canvas.width;
          const y = ((1 - out[i + 1]) / 2) * canvas.height;
          ctx.fillRect(x - 1, y - 1, 2, 2);
        }
      }
      $("vb-status").textContent = `agent 1 (left), agent 2 (right); fitted in ${ms.toFixed(0)} ms`;
    } catch (e) {
      $("vb-status").textContent = String(e);
    }
  }, 10);
}

function drawHistogram() {
  const bins = 60;
  const c = num("pg-c");
  const upper = Math.max(0.5, 6 * (c > 1e-6 ? Math.tanh(c / 2) / (2 * c) : 0.25));
  try {
    const h = pg_histogram(c, num("pg-draws"), bins, upper, BigInt(num("pg-seed")));
    const canvas = $("pg-canvas");
    const ctx = canvas.getContext("2d");
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    const top = Math.max(...h.subarray(0, bins));
    const w = canvas.width / bins;
    ctx.fillStyle = "#4a78b0";
    for (let k = 0; k < bins; k++) {
      const height = (h[k] / top) * (canvas.height - 10);
      ctx.fillRect(k * w, canvas.height - height, w - 1, height);
    }
    const xm = (h[bins + 1] / upper) * canvas.width;
    ctx.strokeStyle = "#c0392b";
    ctx.beginPath();
    ctx.moveTo(xm, 0);
    ctx.lineTo(xm, canvas.height);
    ctx.stroke();
    $("pg-status").textContent =
      `range [0, ${upper.toFixed(2)}); sample mean ${h[bins].toFixed(5)}, exact mean ${h[bins + 1].toFixed(5)} (red line)`;
  } catch (e) {
    $("pg-status").textContent = String(e);
  }
}

await init();
$("gp-run").addEventListener("click", drawField);
$("vb-run").addEventListener("click", drawWeights);
$("pg-run").addEventListener("click", drawHistogram);
drawField();
drawHistogram();
