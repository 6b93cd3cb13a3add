import init, { texture, bicubicRoundtrip, warp, transfer } from "./pkg/rrsr_web.js";

const $ = (id) => document.getElementById(id);
const ZOOM = 2;

let source = null;
let warped = null;

function draw(canvas, frame, zoom = ZOOM) {
  const img = new ImageData(new Uint8ClampedArray(frame.rgba), frame.width, frame.height);
  const tmp = new OffscreenCanvas(frame.width, frame.height);
  tmp.getContext("2d").putImageData(img, 0, 0);
  canvas.width = frame.width * zoom;
  canvas.height = frame.height * zoom;
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function setSource(frame) {
  source = { rgba: frame.rgba, width: frame.width, height: frame.height };
  warped = null;
  draw($("source"), source);
}

function report(id, f) {
  try {
    $(id).textContent = f();
  } catch (e) {
    $(id).textContent = `error: ${e.message ?? e}`;
  }
}

async function loadFile(file) {
  const bitmap = await createImageBitmap(file);
  // keep the demo responsive: cap the long side at 256 px
  const s = Math.min(1, 256 / Math.max(bitmap.width, bitmap.height));
  const w = Math.max(4, Math.round(bitmap.width * s));
  const h = Math.max(4, Math.round(bitmap.height * s));
  const c = new OffscreenCanvas(w, h);
  const ctx = c.getContext("2d");
  ctx.drawImage(bitmap, 0, 0, w, h);
  setSource({ rgba: ctx.getImageData(0, 0, w, h).data, width: w, height: h });
}

await init();
let seed = 1;
setSource(texture(128, 128, seed));

$("regen").onclick = () => setSource(texture(128, 128, ++seed));
$("file").onchange = (e) => e.target.files[0] && loadFile(e.target.files[0]);

$("run-bicubic").onclick = () =>
  report("bicubic-out", () => {
    const f = bicubicRoundtrip(source.rgba, source.width, source.height);
    draw($("bicubic"), f);
    return `Y-PSNR ${f.value.toFixed(2)} dB`;
  });

$("run-warp").onclick = () =>
  report("warp-out", () => {
    const f = warp(source.rgba, source.width, source.height, Number($("seed").value), Number($("lo").value), Number($("hi").value));
    warped = { rgba: f.rgba, width: f.width, height: f.height };
    draw($("warped"), f);
    const o = Array.from(f.offsets, (v) => v.toFixed(1));
    return `vertex offsets (dx, dy): ${[0, 2, 4, 6].map((i) => `(${o[i]}, ${o[i + 1]})`).join(" ")}`;
  });

$("run-match").onclick = () =>
  report("match-out", () => {
    const ref = warped ?? source;
    const f = transfer(source.rgba, source.width, source.height, ref.rgba, ref.width, ref.height, Number($("patch").value));
    draw($("matched"), f, ZOOM * 4);
    return `mean match score ${f.value.toFixed(4)}${warped ? "" : " (no warp yet: matched against itself)"}`;
  });
