import init, { importance, geometry, meteor } from "./pkg/tsg_demo.js";

const $ = (id) => document.getElementById(id);
const fmt = (x, d = 3) => Number(x).toFixed(d);

function showError(el, e) {
  el.innerHTML = `<p class="error">${String(e.message ?? e)}</p>`;
}

function updateImportance() {
  const out = $("importance-out");
  const rows = $("alpha").value.trim().split("\n").map((l) => l.trim().split(/[\s,]+/).map(Number));
  const steps = rows[0].length;
  if (rows.some((r) => r.length !== steps || r.some(Number.isNaN))) {
    return showError(out, "every row needs the same number of numeric columns");
  }
  const pooling = document.querySelector("input[name=pooling]:checked").value;
  let res;
  try {
    res = JSON.parse(importance(new Float64Array(rows.flat()), rows.length, steps, pooling));
  } catch (e) {
    return showError(out, e);
  }
  const gamma = res.gamma.map((g, i) => `<tr><td>obj ${i}</td><td>${fmt(g)}</td></tr>`).join("");
  const top = res.pairs[0].beta;
  const pairs = res.pairs
    .map((p) => `<tr><td>(${p.subject}, ${p.object})</td><td>${fmt(p.delta)}</td><td>${fmt(p.beta)}</td>` +
      `<td style="text-align:left"><span class="bar" style="width:${Math.round(160 * p.beta / top)}px"></span></td></tr>`)
    .join("");
  out.innerHTML =
    `<div class="row"><table><tr><th>object</th><th>pooled</th></tr>${gamma}</table>` +
    `<table><tr><th>pair</th><th>sum</th><th>importance</th><th></th></tr>${pairs}</table></div>`;
}

const boxIds = { a: ["a0", "a1", "a2", "a3"], b: ["b0", "b1", "b2", "b3"] };
const readBox = (k) => boxIds[k].map((id) => Number($(id).value));

function drawBoxes(a, b) {
  const ctx = $("canvas").getContext("2d");
  ctx.clearRect(0, 0, 320, 240);
  for (const [box, color] of [[a, "#4a78c2"], [b, "#d9822b"]]) {
    ctx.strokeStyle = color;
    ctx.fillStyle = color + "33";
    ctx.lineWidth = 2;
    ctx.fillRect(box[0], box[1], box[2] - box[0], box[3] - box[1]);
    ctx.strokeRect(box[0], box[1], box[2] - box[0], box[3] - box[1]);
  }
}

function updateGeometry() {
  const out = $("geometry-out");
  const a = readBox("a");
  const b = readBox("b");
  drawBoxes(a, b);
  let res;
  try {
    res = JSON.parse(geometry(...a, ...b));
  } catch (e) {
    return showError(out, e);
  }
  const names = ["dx / sqrt(area A)", "dy / sqrt(area A)", "sqrt(area B / area A)", "aspect A", "aspect B", "IoU"];
  const rows = res.feature.map((v, i) => `<tr><td style="text-align:left">${names[i]}</td><td>${fmt(v)}</td></tr>`).join("");
  out.innerHTML = `<p><b>IoU ${fmt(res.iou)}</b></p><table>${rows}</table>`;
}

function wireCanvas() {
  const canvas = $("canvas");
  let start = null;
  let target = "a";
  const pos = (ev) => {
    const r = canvas.getBoundingClientRect();
    return [Math.round(ev.clientX - r.left), Math.round(ev.clientY - r.top)];
  };
  canvas.addEventListener("mousedown", (ev) => {
    start = pos(ev);
    target = ev.shiftKey ? "b" : "a";
  });
  canvas.addEventListener("mousemove", (ev) => {
    if (!start) return;
    const [x, y] = pos(ev);
    const box = [Math.min(start[0], x), Math.min(start[1], y), Math.max(start[0], x), Math.max(start[1], y)];
    if (box[2] - box[0] < 2 || box[3] - box[1] < 2) return;
    boxIds[target].forEach((id, i) => ($(id).value = box[i]));
    updateGeometry();
  });
  window.addEventListener("mouseup", () => (start = null));
}

function updateMeteor() {
  const res = JSON.parse(meteor($("cand").value, $("ref").value));
  const passes = res.passes.length ? res.passes.map((t) => fmt(t, 2)).join(", ") : "none";
  $("meteor-out").innerHTML = `<p><b>${fmt(res.score, 4)}</b> &nbsp; clears thresholds: ${passes}</p>`;
}

await init();
$("alpha").addEventListener("input", updateImportance);
document.querySelectorAll("input[name=pooling]").forEach((r) => r.addEventListener("change", updateImportance));
[...boxIds.a, ...boxIds.b].forEach((id) => $(id).addEventListener("input", updateGeometry));
$("cand").addEventListener("input", updateMeteor);
$("ref").addEventListener("input", updateMeteor);
wireCanvas();
updateImportance();
updateGeometry();
updateMeteor();
