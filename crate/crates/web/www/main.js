import init, { phantom_view, simulate_and_calibrate, reconstruct_slice } from "./pkg/ivuscal_web.js";

const $ = (id) => document.getElementById(id);

function setStatus(id, text, isError = false) {
  const el = $(id);
  el.textContent = text;
  el.className = isError ? "status error" : "status";
}

function call(statusId, fn) {
  try {
    return JSON.parse(fn());
  } catch (e) {
    setStatus(statusId, String(e.message || e), true);
    return null;
  }
}

// Top view (x right, y up) of the half-cylinder cavity with its needle tips.
function drawPhantom() {
  const layout = call("phantom-status", () => phantom_view($("angles").value, Number($("radius").value)));
  if (!layout) return;
  const c = $("phantom-canvas");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const r = layout.cavity_radius_mm;
  const k = (c.width / 2 - 20) / r;
  const cx = c.width / 2, cy = c.height - 20;
  g.strokeStyle = "#888";
  g.beginPath();
  g.arc(cx, cy, r * k, Math.PI, 2 * Math.PI);
  g.lineTo(cx - r * k, cy);
  g.stroke();
  g.fillStyle = "#c33";
  g.strokeStyle = "#c99";
  for (const [x, y] of layout.landmarks) {
    const len = Math.hypot(x, y);
    g.beginPath();
    g.moveTo(cx + (x / len) * r * k, cy - (y / len) * r * k);
    g.lineTo(cx + x * k, cy - y * k);
    g.stroke();
    g.beginPath();
    g.arc(cx + x * k, cy - y * k, 3, 0, 2 * Math.PI);
    g.fill();
  }
  g.fillStyle = "#333";
  g.fillRect(cx - 2, cy - 2, 4, 4);
  setStatus("phantom-status", `${layout.landmarks.length} landmarks`);
}

function drawTrace(trace) {
  const c = $("trace-canvas");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const pad = 40;
  const xs = trace.map((p) => p[0]);
  const ys = trace.map((p) => Math.log10(Math.max(p[1], 1e-16)));
  const xMax = Math.max(1, ...xs);
  const yMin = Math.floor(Math.min(...ys)), yMax = Math.ceil(Math.max(...ys));
  const px = (x) => pad + (x / xMax) * (c.width - pad - 10);
  const py = (y) => 10 + ((yMax - y) / Math.max(1, yMax - yMin)) * (c.height - pad - 10);
  g.strokeStyle = "#aaa";
  g.fillStyle = "#555";
  g.font = "11px sans-serif";
  for (let e = yMin; e <= yMax; e++) {
    g.beginPath();
    g.moveTo(pad, py(e));
    g.lineTo(c.width - 10, py(e));
    g.stroke();
    g.fillText(`1e${e}`, 2, py(e) + 4);
  }
  g.fillText(`iteration (max ${xMax})`, c.width / 2 - 40, c.height - 8);
  g.strokeStyle = "#1a5fb4";
  g.lineWidth = 2;
  g.beginPath();
  trace.forEach((p, i) => (i ? g.lineTo(px(p[0]), py(ys[i])) : g.moveTo(px(p[0]), py(ys[i]))));
  g.stroke();
  g.lineWidth = 1;
}

function fillParams(run) {
  const rows = [
    ["roll (deg)", "roll_deg"], ["pitch (deg)", "pitch_deg"], ["yaw (deg)", "yaw_deg"],
    ["tx (mm)", "tx_mm"], ["ty (mm)", "ty_mm"], ["tz (mm)", "tz_mm"], ["scale (mm/px)", "scale_mm_per_px"],
  ];
  const t = $("params-table");
  t.innerHTML = "<tr><th></th><th>ground truth</th><th>estimate</th></tr>";
  for (const [label, key] of rows) {
    const tr = document.createElement("tr");
    tr.innerHTML = `<td>${label}</td><td>${run.ground_truth[key].toFixed(5)}</td><td>${run.estimate[key].toFixed(5)}</td>`;
    t.appendChild(tr);
  }
}

function calibrate() {
  setStatus("cal-status", "running...");
  const args = [Number($("cal-seed").value) >>> 0, Number($("noise-px").value), Number($("noise-mm").value)];
  const t0 = performance.now();
  const run = call("cal-status", () => simulate_and_calibrate(...args));
  if (!run) return;
  const ms = (performance.now() - t0).toFixed(0);
  drawTrace(run.error_trace);
  fillParams(run);
  setStatus(
    "cal-status",
    `${run.iterations} iterations, RMSE ${run.rmse_mm.toExponential(2)} mm, ` +
      `${run.converged ? "converged" : "not converged"}, ${ms} ms`
  );
}

function reconstruct() {
  setStatus("rec-status", "running...");
  const view = call("rec-status", () => reconstruct_slice(Number($("rec-seed").value) >>> 0, Number($("spacing").value)));
  if (!view) return;
  const c = $("slice-canvas");
  c.width = view.width;
  c.height = view.height;
  const g = c.getContext("2d");
  const img = g.createImageData(view.width, view.height);
  view.pixels.forEach((v, i) => {
    img.data.set([v, v, v, 255], 4 * i);
  });
  g.putImageData(img, 0, 0);
  g.strokeStyle = "#e33";
  for (const [x, y] of view.tips_px) {
    g.beginPath();
    g.arc(x, y, 6, 0, 2 * Math.PI);
    g.stroke();
  }
  const [nx, ny, nz] = view.volume_dims;
  setStatus("rec-status", `${view.frames} frames into ${nx}x${ny}x${nz} voxels; red circles mark true tips`);
}

await init();
$("phantom-btn").addEventListener("click", drawPhantom);
$("cal-btn").addEventListener("click", calibrate);
$("rec-btn").addEventListener("click", reconstruct);
drawPhantom();
