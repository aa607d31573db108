import init, { maskLayout, crossRegion, positionSimilarity } from "./pkg/personmae_demo.js";

const GRID = [16, 8];
const CELL = 20;
const $ = (id) => document.getElementById(id);

function drawMask() {
  const ratio = Number($("mask-ratio").value);
  $("mask-ratio-value").textContent = ratio.toFixed(2);
  const text = maskLayout(GRID[0], GRID[1], ratio, $("mask-strategy").value, BigInt($("mask-seed").value || 0));
  const ctx = $("mask-canvas").getContext("2d");
  text.trim().split("\n").forEach((line, r) => {
    [...line].forEach((ch, c) => {
      ctx.fillStyle = ch === "#" ? "#333" : "#e8e8e8";
      ctx.fillRect(c * CELL, r * CELL, CELL - 1, CELL - 1);
    });
  });
  const masked = (text.match(/#/g) || []).length;
  $("mask-info").textContent = `${masked} of ${GRID[0] * GRID[1]} patches masked`;
}

function drawCrossRegion() {
  const maxShift = Number($("cr-shift").value);
  $("cr-shift-value").textContent = maxShift;
  const view = crossRegion(BigInt($("cr-identity").value || 0), BigInt(maxShift), BigInt($("cr-seed").value || 0));
  const [h, w] = [view.canvas_height(), view.canvas_width()];
  const canvas = $("cr-canvas");
  canvas.width = w;
  canvas.height = h;
  const ctx = canvas.getContext("2d");
  ctx.putImageData(new ImageData(new Uint8ClampedArray(view.canvas_rgba()), w, h), 0, 0);
  ctx.lineWidth = 2;
  ctx.strokeStyle = "#2a9d8f";
  ctx.strokeRect(1, 1, view.region_width() - 2, view.region_height() - 2);
  ctx.strokeStyle = "#e76f51";
  ctx.strokeRect(view.shift_col() + 1, view.shift_row() + 1, view.region_width() - 2, view.region_height() - 2);
  $("cr-info").textContent =
    `canvas ${h}x${w} (pad ${view.pad()})\n` +
    `RegionA (green) at 0,0\nRegionB (orange) at ${view.shift_row()},${view.shift_col()}\n\n` +
    `first RegionB row in RegionA's grid:\n${view.coords()}`;
  view.free();
}

function drawSimilarity() {
  const row = Number($("pe-row").value);
  const col = Number($("pe-col").value);
  $("pe-row-value").textContent = row.toFixed(4);
  $("pe-col-value").textContent = col.toFixed(4);
  const sims = positionSimilarity(GRID[0], GRID[1], Number($("pe-dim").value), row, col);
  const ctx = $("pe-canvas").getContext("2d");
  sims.forEach((s, i) => {
    const shade = Math.round(255 * Math.max(0, s));
    ctx.fillStyle = `rgb(${shade}, ${Math.round(shade * 0.6)}, ${255 - shade})`;
    ctx.fillRect((i % GRID[1]) * CELL, Math.floor(i / GRID[1]) * CELL, CELL - 1, CELL - 1);
  });
  ctx.strokeStyle = "#fff";
  ctx.beginPath();
  ctx.arc((col + 0.5) * CELL, (row + 0.5) * CELL, 4, 0, 2 * Math.PI);
  ctx.stroke();
}

function wire(ids, draw) {
  ids.forEach((id) => $(id).addEventListener("input", draw));
  draw();
}

await init();
wire(["mask-ratio", "mask-strategy", "mask-seed"], drawMask);
wire(["cr-identity", "cr-shift", "cr-seed"], drawCrossRegion);
wire(["pe-row", "pe-col", "pe-dim"], drawSimilarity);
