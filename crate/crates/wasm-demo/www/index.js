// Built with: wasm-pack build --target web --out-dir www/pkg crates/wasm-demo
import init, { normalizeScores, attentionHeatmap, noisyList } from "./pkg/opendec_wasm_demo.js";

const $ = (id) => document.getElementById(id);

function fail(el, e) {
  el.innerHTML = `<p class="err">${e}</p>`;
}

function showNormalize() {
  const out = $("norm-out");
  try {
    const rows = JSON.parse(normalizeScores($("scores").value));
    out.innerHTML = "<table>" + rows.map((r) =>
      `<tr><th>${r.scheme}</th>` +
      (r.values ? r.values.map((v) => `<td>${v.toFixed(4)}</td>`).join("") : `<td class="err">${r.error}</td>`) +
      "</tr>").join("") + "</table>";
  } catch (e) { fail(out, e); }
}

function showHeatmap() {
  const canvas = $("canvas");
  const ctx = canvas.getContext("2d");
  try {
    const h = JSON.parse(attentionHeatmap($("doc-scores").value, $("modulation").value, Number($("heat-seed").value)));
    const cell = canvas.width / h.n;
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    for (let i = 0; i < h.n; i++) {
      for (let j = 0; j <= i; j++) {
        // sqrt so small weights stay visible
        const shade = Math.round(255 * (1 - Math.sqrt(h.weights[i * h.n + j])));
        ctx.fillStyle = `rgb(${shade}, ${shade}, 255)`;
        ctx.fillRect(j * cell, i * cell, cell, cell);
      }
    }
    $("mass").textContent = "Last-position mass per document: " + h.doc_mass.map((m) => m.toFixed(3)).join(", ");
  } catch (e) { fail($("mass"), e); }
}

function showList() {
  const out = $("list-out");
  try {
    const list = JSON.parse(noisyList(
      Number($("n-rel").value), Number($("n-part").value), Number($("n-irr").value),
      $("order").value, Number($("list-seed").value)));
    out.innerHTML = `<p>${list.question}</p><table>` + list.docs.map((d) =>
      `<tr class="${d.tag}"><td>${d.position}</td><td class="text">${d.tag}</td>` +
      `<td>${d.score.toFixed(3)}</td><td class="text">${d.text}</td></tr>`).join("") + "</table>";
  } catch (e) { fail(out, e); }
}

await init();
$("normalize").onclick = showNormalize;
$("heat").onclick = showHeatmap;
$("build").onclick = showList;
showNormalize();
showHeatmap();
showList();
