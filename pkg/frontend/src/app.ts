/** DOM glue: hash-routed single-page console over the experiment API.
 *
 * Views are rebuilt from fresh API responses on every navigation and poll
 * tick; nothing user-visible lives only in client state.
 */

import { ApiClient, ApiError } from "./api.js";
import { ExperimentDoc, SystemEntry } from "./model.js";
import {
  FormField,
  FormValues,
  actionAvailability,
  clonePrefill,
  coerceInput,
  configBody,
  describeState,
  nextPollDelayMs,
  parameterForm,
  stagedInputPath,
} from "./viewmodel.js";

const api = new ApiClient("");
const root = () => document.getElementById("app")!;

let pollTimer: number | undefined;
let idleTicks = 0;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function navigate(hash: string): void {
  window.location.hash = hash;
}

function errorBanner(err: unknown): HTMLElement {
  const message = err instanceof ApiError ? `${err.code}: ${err.message}` : String(err);
  return el("div", { class: "error" }, message);
}

// -- system browser ----------------------------------------------------------

async function renderSystems(): Promise<void> {
  const container = el("section", {}, el("h2", {}, "Systems"));
  try {
    const systems = await api.systems();
    if (systems.length === 0) {
      container.append(el("p", { class: "empty" }, "No systems registered yet. Ask the operator to add repository links."));
    }
    for (const entry of systems) {
      container.append(systemCard(entry));
    }
  } catch (err) {
    container.append(errorBanner(err));
  }
  root().replaceChildren(container);
}

function systemCard(entry: SystemEntry): HTMLElement {
  if (entry.error || !entry.sysdef) {
    return el(
      "div",
      { class: "card unavailable" },
      el("h3", {}, entry.repo_url ?? "(unknown)"),
      el("p", { class: "error" }, `unavailable: ${entry.error ?? "no definition"}`),
    );
  }
  const fields = parameterForm(entry.sysdef);
  const buildCount = fields.filter((f) => f.phase === "build").length;
  const runCount = fields.filter((f) => f.phase === "run").length;
  const create = el("button", {}, "New experiment");
  create.onclick = async () => {
    const exp = await api.createExperiment(entry.name!, entry.version!);
    navigate(`#/experiments/${exp.id}`);
  };
  const origin = entry.via_backend
    ? el("p", { class: "origin" }, `offered via ${entry.via_backend}`)
    : el("p", { class: "origin" }, entry.image ?? "");
  return el(
    "div",
    { class: "card" },
    el("h3", {}, `${entry.name} v${entry.version}`),
    origin,
    el("p", {}, `${buildCount} build + ${runCount} run parameters`),
    create,
  );
}

// -- experiment list ----------------------------------------------------------

async function renderExperiments(): Promise<void> {
  const container = el("section", {}, el("h2", {}, "Experiments"));
  try {
    const { experiments } = await api.listExperiments();
    const table = el("table", {}, el("tr", {}, el("th", {}, "id"), el("th", {}, "system"), el("th", {}, "backend"), el("th", {}, "state")));
    for (const exp of experiments) {
      const row = el(
        "tr",
        { class: "clickable" },
        el("td", {}, exp.id),
        el("td", {}, `${exp.system.name} v${exp.system.version}`),
        el("td", {}, exp.backend),
        el("td", { class: `state-${exp.state}` }, exp.state),
      );
      row.onclick = () => navigate(`#/experiments/${exp.id}`);
      table.append(row);
    }
    container.append(table);
  } catch (err) {
    container.append(errorBanner(err));
  }
  root().replaceChildren(container);
}

// -- experiment console --------------------------------------------------------

const formEdits = new Map<string, FormValues>();

async function renderConsole(id: string): Promise<void> {
  let exp: ExperimentDoc;
  try {
    exp = await api.experiment(id);
  } catch (err) {
    root().replaceChildren(errorBanner(err));
    return;
  }
  const systems = await api.systems();
  const entry = systems.find((s) => s.name === exp.system.name && s.version === exp.system.version);
  const fields = entry?.sysdef ? parameterForm(entry.sysdef) : [];
  const values = formEdits.get(id) ?? seedValues(exp);
  formEdits.set(id, values);

  const availability = actionAvailability(exp.state);
  const header = el(
    "section",
    {},
    el("h2", {}, `${exp.id} — ${exp.system.name} v${exp.system.version}`),
    el("p", {}, `backend: ${exp.backend} | state: `, el("span", { class: `state-${exp.state}` }, describeState(exp))),
  );

  const form = el("section", {}, el("h3", {}, "Parameters"));
  for (const field of fields) {
    form.append(fieldRow(id, exp, field, values));
  }

  const actions = el("section", { class: "actions" });
  const configureBtn = el("button", {}, "Save configuration");
  configureBtn.disabled = !availability.configure;
  configureBtn.onclick = async () => {
    try {
      await api.configure(id, configBody(exp.system, fields, values));
      refresh();
    } catch (err) {
      actions.append(errorBanner(err));
    }
  };
  const buildBtn = el("button", {}, "Build");
  buildBtn.disabled = !availability.build;
  buildBtn.onclick = async () => {
    await api.build(id);
    refresh();
  };
  const runBtn = el("button", {}, "Run");
  runBtn.disabled = !availability.run;
  runBtn.onclick = async () => {
    await api.run(id);
    refresh();
  };
  const cloneBtn = el("button", {}, "Clone");
  cloneBtn.onclick = async () => {
    const clone = await api.createExperiment(exp.system.name, exp.system.version, exp.backend);
    formEdits.set(clone.id, clonePrefill(exp));
    if (exp.config) {
      await api.configure(clone.id, configBody(exp.system, fields, clonePrefill(exp)));
    }
    navigate(`#/experiments/${clone.id}`);
  };
  actions.append(configureBtn, buildBtn, runBtn, cloneBtn);

  const logs = el("section", {}, el("h3", {}, "Logs"));
  for (const action of ["build", "run"] as const) {
    if (exp.action_log.some((o) => o.action === action)) {
      const pre = el("pre", { class: "log" }, "loading...");
      api.log(id, action).then((text) => (pre.textContent = text));
      logs.append(el("h4", {}, `${action} log`), pre);
    }
  }

  const results = el("section", {}, el("h3", {}, "Results"));
  if (exp.results && availability.downloadResults) {
    for (const [key, entryDoc] of Object.entries(exp.results)) {
      if (entryDoc.present) {
        const link = el("a", { href: api.resultUrl(id, key), download: "" }, `${key} (${entryDoc.type || "file"}, ${entryDoc.size_bytes} bytes)`);
        results.append(el("p", {}, link));
      } else {
        results.append(el("p", { class: "missing" }, `${key}: declared but not produced`));
      }
    }
  } else {
    results.append(el("p", { class: "empty" }, "Results become available when a run finishes."));
  }

  root().replaceChildren(header, form, actions, logs, results);
  schedulePoll(exp);
}

function seedValues(exp: ExperimentDoc): FormValues {
  return clonePrefill(exp);
}

function fieldRow(id: string, exp: ExperimentDoc, field: FormField, values: FormValues): HTMLElement {
  const current = values.has(field.key) ? values.get(field.key)! : field.defaultValue;
  const label = el("label", {}, `${field.key} (${field.phase})`);
  let input: HTMLElement;
  if (field.kind === "file") {
    const staged = exp.staged_inputs[field.key];
    const picker = el("input", { type: "file" }) as HTMLInputElement;
    picker.onchange = async () => {
      const file = picker.files?.[0];
      if (file) {
        await api.uploadInput(id, field.key, file);
        values.set(field.key, stagedInputPath(file.name));
        refresh();
      }
    };
    input = el("span", {}, picker, el("small", {}, staged ? ` staged: ${staged}` : ` default: ${String(current)}`));
  } else if (field.kind === "boolean") {
    const box = el("input", { type: "checkbox" }) as HTMLInputElement;
    box.checked = Boolean(current);
    box.onchange = () => values.set(field.key, box.checked);
    input = box;
  } else {
    const box = el("input", { type: field.kind === "number" ? "number" : "text", value: String(current) }) as HTMLInputElement;
    box.onchange = () => values.set(field.key, coerceInput(field, box.value));
    input = box;
  }
  return el("div", { class: "field" }, label, input);
}

// -- polling -------------------------------------------------------------------

function schedulePoll(exp: ExperimentDoc): void {
  if (pollTimer !== undefined) window.clearTimeout(pollTimer);
  const inFlight = exp.state === "Building" || exp.state === "Running";
  idleTicks = inFlight ? 0 : idleTicks + 1;
  pollTimer = window.setTimeout(refresh, nextPollDelayMs(exp.state, idleTicks));
}

function refresh(): void {
  route().catch((err) => root().replaceChildren(errorBanner(err)));
}

async function route(): Promise<void> {
  if (pollTimer !== undefined) {
    window.clearTimeout(pollTimer);
    pollTimer = undefined;
  }
  const hash = window.location.hash || "#/systems";
  const consoleMatch = hash.match(/^#\/experiments\/(.+)$/);
  if (consoleMatch) {
    await renderConsole(consoleMatch[1]);
  } else if (hash.startsWith("#/experiments")) {
    await renderExperiments();
  } else {
    await renderSystems();
  }
  for (const link of document.querySelectorAll("nav a")) {
    link.classList.toggle("active", link.getAttribute("href") === hash);
  }
}

window.addEventListener("hashchange", refresh);
window.addEventListener("DOMContentLoaded", refresh);
