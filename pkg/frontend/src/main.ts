import { ApiClient } from "./api.js";
import { SessionController } from "./controller.js";
import { ConsoleStore } from "./state.js";
import { renderApp } from "./ui.js";

const AUTOPLAY_INTERVAL_MS = 450;

function creationForm(root: HTMLElement, api: ApiClient): void {
  root.innerHTML = `
    <header><h1>Expert console</h1></header>
    <div class="card narrow">
      <h3>Start a live session</h3>
      <label>Policy
        <select id="policy">
          <option value="query_gap">query gap (asks when unsure)</option>
          <option value="always_query">always query</option>
          <option value="exp_decay">exponential decay</option>
          <option value="linucb">fully autonomous</option>
        </select>
      </label>
      <label>Foods <input id="n-foods" type="number" value="3" min="1" max="10"/></label>
      <label>Seed <input id="seed" type="number" value="0"/></label>
      <button id="create">Create session</button>
      <p id="create-error" class="error"></p>
    </div>`;
  root.querySelector<HTMLButtonElement>("#create")!.addEventListener("click", async () => {
    const policy = (root.querySelector("#policy") as HTMLSelectElement).value;
    const count = parseInt((root.querySelector("#n-foods") as HTMLInputElement).value, 10);
    const seed = parseInt((root.querySelector("#seed") as HTMLInputElement).value, 10);
    try {
      const created = await api.createSession({
        seed,
        policy: { kind: policy },
        foods: { split: "test", count },
        workload_model: { floor_scale: 1.0, history_len: 10 },
      });
      const url = new URL(window.location.href);
      url.searchParams.set("session", created.session_id);
      window.location.href = url.toString();
    } catch (err) {
      root.querySelector("#create-error")!.textContent =
        err instanceof Error ? err.message : String(err);
    }
  });
}

async function boot(): Promise<void> {
  const root = document.getElementById("app")!;
  const api = new ApiClient("");
  const sessionId = new URLSearchParams(window.location.search).get("session");
  if (!sessionId) {
    creationForm(root, api);
    return;
  }
  const store = new ConsoleStore();
  const controller = new SessionController(api, store, sessionId);
  store.subscribe(() => renderApp(root, store.state, controller));
  try {
    await controller.connect();
  } catch (err) {
    root.innerHTML = `<div class="banner error">cannot open session <code>${sessionId}</code>:
      ${err instanceof Error ? err.message : String(err)}</div>
      <p><a href="./">back to session creation</a></p>`;
    return;
  }
  // autoplay: keep stepping the policy whenever the server is waiting on it
  window.setInterval(() => {
    if (store.state.autoplay && store.state.session?.phase === "awaiting_policy") {
      void controller.advanceOnce();
    }
  }, AUTOPLAY_INTERVAL_MS);
}

void boot();
