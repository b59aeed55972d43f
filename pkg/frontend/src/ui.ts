import { gapChart, workloadChart } from "./charts.js";
import { SessionController } from "./controller.js";
import {
  ConsoleState,
  gapChartSeries,
  paletteEnabled,
  surveyCardActive,
  workloadChartSeries,
} from "./state.js";
import { SURVEY_FIELDS, SURVEY_QUESTIONS } from "./types.js";

function esc(text: unknown): string {
  return String(text).replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" }[c] as string));
}

function phaseBadge(phase: string): string {
  return `<span class="badge badge-${esc(phase)}">${esc(phase.replace(/_/g, " "))}</span>`;
}

function connectionBanner(state: ConsoleState): string {
  if (state.connection === "live") return "";
  const label =
    state.connection === "retrying"
      ? "connection lost — retrying…"
      : state.connection === "connecting"
        ? "connecting…"
        : `stream ${esc(state.connection)}`;
  return `<div class="banner">${label}</div>`;
}

function paletteHtml(state: ConsoleState): string {
  const session = state.session!;
  const enabled = paletteEnabled(state);
  const buttons = session.action_labels
    .map(
      (label, i) =>
        `<button class="action-btn" data-action="${i}" ${enabled ? "" : "disabled"}>
           <span class="action-index">${i}</span>${esc(label)}
         </button>`,
    )
    .join("");
  return `<div class="palette">${buttons}</div>`;
}

function pendingQueryHtml(state: ConsoleState): string {
  const q = state.session?.pending_query;
  if (!q) return "";
  const gap = q.gap !== null && q.gap !== undefined ? q.gap.toFixed(3) : "–";
  const thr = q.threshold !== null && q.threshold !== undefined ? q.threshold.toFixed(3) : "–";
  return `<div class="card query-card">
    <h3>The robot asks for help</h3>
    <p>Which action should it use on <strong>${esc(q.food_label)}</strong>
       (item ${q.food_index + 1}, attempt ${q.attempt + 1})?</p>
    <p class="fine">performance gap ${gap} &gt; threshold ${thr}</p>
  </div>`;
}

function surveyHtml(state: ConsoleState): string {
  if (!surveyCardActive(state)) return "";
  const rows = SURVEY_FIELDS.map((field) => {
    const chosen = state.surveyDraft[field];
    const radios = [1, 2, 3, 4, 5]
      .map(
        (v) =>
          `<label class="likert"><input type="radio" name="survey-${field}" value="${v}" ${
            chosen === v ? "checked" : ""
          }/>${v}</label>`,
      )
      .join("");
    return `<div class="survey-row"><span class="survey-q">${esc(SURVEY_QUESTIONS[field])}</span><span>${radios}</span></div>`;
  }).join("");
  const error = state.surveyError ? `<p class="error">${esc(state.surveyError)}</p>` : "";
  return `<div class="card survey-card">
    <h3>Quick workload survey</h3>
    ${rows}
    ${error}
    <button id="survey-submit" ${state.submitting ? "disabled" : ""}>Submit survey</button>
  </div>`;
}

function traceHtml(state: ConsoleState): string {
  const rows = state.session!.trace
    .slice()
    .reverse()
    .map(
      (r) => `<tr class="${r.queried ? "row-query" : ""}">
        <td>${r.timestep}</td><td>${esc(r.food_label)}</td><td>${r.attempt + 1}</td>
        <td>${esc(r.action_label)}${r.deferred ? " 🤝" : ""}</td>
        <td>${r.reward ? "✓" : "✗"}</td></tr>`,
    )
    .join("");
  return `<table class="trace"><thead><tr><th>t</th><th>food</th><th>try</th><th>action</th><th>r</th></tr></thead><tbody>${rows}</tbody></table>`;
}

function eventLogHtml(state: ConsoleState): string {
  const items = state.eventLog
    .slice(-12)
    .reverse()
    .map((ev) => `<li><code>#${ev.seq}</code> ${esc(ev.kind)}</li>`)
    .join("");
  return `<ul class="event-log">${items}</ul>`;
}

function revealHtml(state: ConsoleState): string {
  const reveal = state.session?.revealed_success;
  if (!reveal) return "";
  const blocks = Object.entries(reveal)
    .map(([label, bars]) => {
      const cells = bars
        .map(
          (v, i) =>
            `<div class="bar-wrap" title="${esc(state.session!.action_labels[i])}: ${(v * 100).toFixed(0)}%">
               <div class="bar" style="height:${Math.round(v * 48)}px"></div>
             </div>`,
        )
        .join("");
      return `<div class="reveal-food"><span>${esc(label)}</span><div class="bars">${cells}</div></div>`;
    })
    .join("");
  return `<div class="card"><h3>Ground-truth success rates</h3>${blocks}</div>`;
}

export function renderApp(root: HTMLElement, state: ConsoleState, controller: SessionController): void {
  const session = state.session;
  if (!session) {
    root.innerHTML = `${connectionBanner(state)}<p class="fine">loading session…</p>`;
    return;
  }
  const finished = session.phase === "finished";
  const wl = workloadChartSeries(session);
  const gaps = gapChartSeries(session);
  const err = state.lastError ? `<div class="banner error">${esc(state.lastError)}</div>` : "";
  root.innerHTML = `
    ${connectionBanner(state)}${err}
    <header>
      <h1>Expert console</h1>
      <div>
        session <code>${esc(session.session_id)}</code>
        · policy <code>${esc(session.policy)}</code>
        · ${phaseBadge(session.phase)}
      </div>
    </header>
    <div class="columns">
      <section class="col">
        <div class="card">
          <h3>Episode</h3>
          <p>food ${Math.min(session.food_index + 1, session.n_foods)} of ${session.n_foods}
             ${session.current_food ? `— <strong>${esc(session.current_food.label)}</strong>` : ""}
             · attempt ${session.attempt + 1}/${session.max_attempts} · t=${session.timestep}</p>
          <p>
            <button id="step-btn" ${session.phase === "awaiting_policy" ? "" : "disabled"}>Step policy</button>
            <label class="fine"><input type="checkbox" id="autoplay" ${state.autoplay ? "checked" : ""}/> autoplay</label>
            ${finished ? `<span class="badge badge-finished">final WL ${session.final_workload?.toFixed(3)}</span>` : ""}
          </p>
        </div>
        ${pendingQueryHtml(state)}
        <div class="card">
          <h3>Action palette</h3>
          ${paletteHtml(state)}
        </div>
        ${surveyHtml(state)}
        ${finished ? revealHtml(state) : ""}
      </section>
      <section class="col">
        <div class="card"><h3>Predicted workload</h3>${workloadChart(wl.predicted, wl.reported)}</div>
        <div class="card"><h3>Gap vs threshold</h3>${gapChart(gaps.gaps, gaps.thresholds)}</div>
        <div class="card"><h3>Trace</h3>${traceHtml(state)}</div>
        <div class="card"><h3>Events</h3>${eventLogHtml(state)}</div>
      </section>
    </div>`;

  root.querySelectorAll<HTMLButtonElement>(".action-btn").forEach((btn) => {
    btn.addEventListener("click", () => {
      void controller.answerQuery(parseInt(btn.dataset.action!, 10));
    });
  });
  root.querySelector<HTMLButtonElement>("#step-btn")?.addEventListener("click", () => {
    void controller.advanceOnce();
  });
  root.querySelector<HTMLInputElement>("#autoplay")?.addEventListener("change", (e) => {
    controller.store.setAutoplay((e.target as HTMLInputElement).checked);
  });
  SURVEY_FIELDS.forEach((field) => {
    root.querySelectorAll<HTMLInputElement>(`input[name="survey-${field}"]`).forEach((input) => {
      input.addEventListener("change", () => {
        controller.store.setSurveyField(field, parseInt(input.value, 10));
      });
    });
  });
  root.querySelector<HTMLButtonElement>("#survey-submit")?.addEventListener("click", () => {
    void controller.completeSurvey(controller.store.state.surveyDraft);
  });
}
