import init, { Demo } from "./pkg/bevpaint_web.js";

const $ = (id) => document.getElementById(id);
let demo = null;

function blit(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  const img = new ImageData(new Uint8ClampedArray(rgba), w, h);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function drawCameras() {
  const strip = $("cams");
  strip.replaceChildren();
  const w = demo.camera_width();
  const h = demo.camera_height();
  for (let k = 0; k < demo.cameras(); k++) {
    const fig = document.createElement("figure");
    const c = document.createElement("canvas");
    blit(c, demo.camera_rgba(k), w, h);
    const cap = document.createElement("figcaption");
    cap.textContent = demo.camera_name(k);
    fig.append(c, cap);
    strip.append(fig);
  }
}

function drawBev() {
  const view = document.querySelector("input[name=view]:checked").value;
  const n = demo.grid_size();
  const t0 = performance.now();
  let rgba;
  if (view === "ipm") rgba = demo.ipm_rgba();
  else if (view === "painted") rgba = demo.painted_rgba(Number($("channels").value));
  else rgba = demo.ground_truth_rgba();
  blit($("bev"), rgba, n, n);
  $("status").textContent = `${view}: ${(performance.now() - t0).toFixed(0)} ms`;
}

function drawFrustum() {
  const d = Number($("depth").value);
  // Bins are 1 m wide starting at 2 m.
  $("depth-out").textContent = `${2 + d}-${3 + d} m`;
  const n = demo.grid_size();
  blit($("frustum"), demo.frustum_rgba(d), n, n);
}

function regenerate() {
  const seed = Math.max(0, Number($("seed").value) | 0);
  const vehicles = Math.max(0, Number($("vehicles").value) | 0);
  if (demo) demo.free();
  demo = new Demo(seed, vehicles);
  $("depth").max = demo.depth_bins() - 1;
  drawCameras();
  drawBev();
  drawFrustum();
}

await init();
$("regen").addEventListener("click", regenerate);
for (const r of document.querySelectorAll("input[name=view]")) r.addEventListener("change", drawBev);
$("channels").addEventListener("input", () => {
  $("channels-out").textContent = $("channels").value;
  if (document.querySelector("input[name=view]:checked").value === "painted") drawBev();
});
$("depth").addEventListener("input", drawFrustum);
regenerate();
