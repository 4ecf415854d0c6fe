/** Pure view logic: button enablement, parameter forms, config bodies.
 *
 * Everything here is a function of API responses (plus local form edits), so
 * the whole view can be rebuilt from a refresh at any time.
 */

import {
  ExperimentDoc,
  ExperimentState,
  LifecycleAction,
  ParameterDecl,
  Scalar,
  SysCfgDoc,
  SysDefDoc,
  isActionLegal,
} from "./model.js";

export interface ActionAvailability {
  configure: boolean;
  build: boolean;
  run: boolean;
  downloadResults: boolean;
}

export function actionAvailability(state: ExperimentState): ActionAvailability {
  return {
    configure: isActionLegal(state, "configure"),
    build: isActionLegal(state, "build"),
    run: isActionLegal(state, "run"),
    downloadResults: state === "Finished",
  };
}

export type FieldKind = "text" | "number" | "boolean" | "file";

export interface FormField {
  key: string;
  phase: "build" | "run";
  kind: FieldKind;
  defaultValue: Scalar;
  isFile: boolean;
}

function declDefault(decl: Scalar | ParameterDecl): { value: Scalar; isFile: boolean } {
  if (decl !== null && typeof decl === "object") {
    return { value: decl.default_value, isFile: Boolean(decl.is_file) };
  }
  return { value: decl, isFile: false };
}

function fieldKind(value: Scalar, isFile: boolean): FieldKind {
  if (isFile) return "file";
  if (typeof value === "boolean") return "boolean";
  if (typeof value === "number") return "number";
  return "text";
}

/** Flatten a SysDef's parameter schemas into render-ready form fields. */
export function parameterForm(sysdef: SysDefDoc): FormField[] {
  const fields: FormField[] = [];
  for (const phase of ["build", "run"] as const) {
    const section = phase === "build" ? sysdef.build_parameters : sysdef.run_parameters;
    for (const [key, decl] of Object.entries(section ?? {})) {
      const { value, isFile } = declDefault(decl);
      fields.push({ key, phase, kind: fieldKind(value, isFile), defaultValue: value, isFile });
    }
  }
  return fields;
}

/** Current form values: key -> edited value; absent means untouched. */
export type FormValues = Map<string, Scalar>;

/** The in-container path a staged upload will be visible under. */
export function stagedInputPath(filename: string): string {
  return `/sysapi/inputs/${filename}`;
}

/** Build the configuration document to PUT: only overridden parameters are
 * sent, defaults stay implicit. */
export function configBody(
  system: { name: string; version: string },
  fields: FormField[],
  values: FormValues,
): SysCfgDoc {
  const body: SysCfgDoc = { system: { name: system.name, version: system.version } };
  for (const field of fields) {
    if (!values.has(field.key)) continue;
    const value = values.get(field.key) as Scalar;
    if (value === field.defaultValue) continue;
    const section = field.phase === "build" ? "build_parameters" : "run_parameters";
    (body[section] ??= {})[field.key] = value;
  }
  return body;
}

/** Parse a text-input edit back into the parameter's scalar kind. */
export function coerceInput(field: FormField, raw: string): Scalar {
  if (field.kind === "number") {
    const asFloat = Number(raw);
    if (Number.isNaN(asFloat)) return raw;
    return Number.isInteger(asFloat) && !raw.includes(".") ? Math.trunc(asFloat) : asFloat;
  }
  if (field.kind === "boolean") return raw === "true" || raw === "on" || raw === "1";
  return raw;
}

/** Pre-fill form values from an existing experiment's stored overrides
 * (what-if iteration: clone, then tweak). Results are never carried over. */
export function clonePrefill(source: ExperimentDoc): FormValues {
  const values: FormValues = new Map();
  if (source.config) {
    for (const [key, value] of Object.entries(source.config.build_overrides)) values.set(key, value);
    for (const [key, value] of Object.entries(source.config.run_overrides)) values.set(key, value);
  }
  return values;
}

/** The config document a cloned experiment should be configured with. */
export function cloneConfigBody(source: ExperimentDoc): SysCfgDoc {
  const body: SysCfgDoc = {
    system: { name: source.system.name, version: source.system.version },
  };
  if (source.config && Object.keys(source.config.build_overrides).length > 0) {
    body.build_parameters = { ...source.config.build_overrides };
  }
  if (source.config && Object.keys(source.config.run_overrides).length > 0) {
    body.run_parameters = { ...source.config.run_overrides };
  }
  return body;
}

export function describeState(doc: ExperimentDoc): string {
  return doc.state_reason ? `${doc.state} (${doc.state_reason})` : doc.state;
}

/** Poll cadence: 1 s while anything is in flight, backing off when idle. */
export function nextPollDelayMs(state: ExperimentState, idleTicks: number): number {
  if (state === "Building" || state === "Running") return 1000;
  return Math.min(1000 * 2 ** Math.min(idleTicks, 4), 16000);
}
