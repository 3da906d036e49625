import init, { positionTable, ShiftView, noamCurve } from "./pkg/relspeech_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

// blue for negative, red for positive, scaled by the largest magnitude
function heatmap(canvas, values, rows, cols, scale) {
  const ctx = canvas.getContext("2d");
  const img = ctx.createImageData(cols, rows);
  const m = scale ?? Math.max(1e-12, ...values.map(Math.abs));
  values.forEach((v, i) => {
    const t = Math.max(-1, Math.min(1, v / m));
    const o = i * 4;
    img.data[o] = t > 0 ? 255 : Math.round(255 * (1 + t));
    img.data[o + 1] = Math.round(255 * (1 - Math.abs(t)));
    img.data[o + 2] = t < 0 ? 255 : Math.round(255 * (1 - t));
    img.data[o + 3] = 255;
  });
  const off = new OffscreenCanvas(cols, rows);
  off.getContext("2d").putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  ctx.drawImage(off, 0, 0, canvas.width, canvas.height);
}

function drawTable() {
  const len = num("tab-len");
  const dim = num("tab-dim");
  const rel = $("tab-rel").checked;
  try {
    const values = positionTable(len, dim, rel);
    const rows = values.length / dim;
    heatmap($("tab-canvas"), Array.from(values), rows, dim, 1);
    $("tab-note").textContent = rel
      ? `${rows} rows: distance ${len - 1} at the top down to ${-(len - 1)}`
      : `${rows} rows: position 0 at the top`;
  } catch (e) {
    $("tab-note").textContent = String(e);
  }
}

function drawShift() {
  try {
    const view = new ShiftView(num("sh-len"), num("sh-pad"), BigInt(num("sh-seed")));
    const k = view.frames;
    const rb = Array.from(view.relativeBase());
    const ab = Array.from(view.absoluteBase());
    const scale = Math.max(...rb.map(Math.abs), ...ab.map(Math.abs));
    heatmap($("rel-base"), rb, k, k, scale);
    heatmap($("rel-pad"), Array.from(view.relativePadded()), k, k, scale);
    heatmap($("abs-base"), ab, k, k, scale);
    heatmap($("abs-pad"), Array.from(view.absolutePadded()), k, k, scale);
    $("sh-note").textContent =
      `max change: relative ${view.relativeChange().toExponential(2)}, absolute ${view.absoluteChange().toExponential(2)}`;
    view.free();
  } catch (e) {
    $("sh-note").textContent = String(e);
  }
}

function drawLr() {
  const canvas = $("lr-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  try {
    const lr = noamCurve(num("lr-d"), BigInt(num("lr-w")), BigInt(num("lr-n")));
    const peak = Math.max(...lr);
    const pad = 10;
    const w = canvas.width - 2 * pad;
    const h = canvas.height - 2 * pad;
    ctx.beginPath();
    lr.forEach((v, i) => {
      const x = pad + (w * i) / Math.max(1, lr.length - 1);
      const y = pad + h * (1 - v / peak);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.strokeStyle = "#c33";
    ctx.stroke();
    const at = lr.indexOf(peak) + 1;
    $("lr-note").textContent = `peak ${peak.toExponential(4)} at update ${at}`;
  } catch (e) {
    $("lr-note").textContent = String(e);
  }
}

await init();
for (const id of ["tab-len", "tab-dim", "tab-rel"]) $(id).addEventListener("input", drawTable);
for (const id of ["sh-len", "sh-pad", "sh-seed"]) $(id).addEventListener("input", drawShift);
for (const id of ["lr-d", "lr-w", "lr-n"]) $(id).addEventListener("input", drawLr);
drawTable();
drawShift();
drawLr();
