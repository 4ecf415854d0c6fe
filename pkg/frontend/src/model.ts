/** Wire-format types of the experiment service plus the lifecycle table.
 *
 * The client never invents state transitions: every state it displays came
 * from the API. The transition table exists here only to decide which action
 * buttons are offered in a given (server-reported) state.
 */

export type Scalar = string | number | boolean;

export type ExperimentState =
  | "Created"
  | "Configured"
  | "Building"
  | "Built"
  | "BuildFailed"
  | "Running"
  | "Finished"
  | "RunFailed";

export const ALL_STATES: ExperimentState[] = [
  "Created",
  "Configured",
  "Building",
  "Built",
  "BuildFailed",
  "Running",
  "Finished",
  "RunFailed",
];

export type LifecycleAction = "configure" | "build" | "run";

/** States in which each user-triggered lifecycle event is legal. */
const LEGAL_STATES: Record<LifecycleAction, ReadonlySet<ExperimentState>> = {
  configure: new Set(["Created", "Configured", "Built", "Finished", "BuildFailed", "RunFailed"]),
  build: new Set(["Configured"]),
  run: new Set(["Built", "Finished"]),
};

export function isActionLegal(state: ExperimentState, action: LifecycleAction): boolean {
  return LEGAL_STATES[action].has(state);
}

export interface ParameterDecl {
  default_value: Scalar;
  is_file?: boolean;
}

export interface SysDefDoc {
  name: string;
  version: string;
  docker_image: string;
  build_command: string;
  run_command: string;
  build_parameters?: Record<string, Scalar | ParameterDecl>;
  run_parameters?: Record<string, Scalar | ParameterDecl>;
  results?: Record<string, { path: string; type?: string }>;
}

export interface SystemEntry {
  name: string | null;
  version: string | null;
  image: string | null;
  repo_url: string | null;
  revision: string | null;
  error: string | null;
  sysdef: SysDefDoc | null;
  via_backend?: string;
}

export interface SysCfgDoc {
  system: { name: string; version: string };
  build_parameters?: Record<string, Scalar>;
  run_parameters?: Record<string, Scalar>;
}

export interface ActionOutcomeDoc {
  action: "build" | "run";
  exit_status: number;
  duration_s: number;
  log_ref: string;
  started_at: number;
}

export interface ResultEntryDoc {
  path: string;
  type: string;
  present: boolean;
  size_bytes: number;
}

export interface ExperimentDoc {
  id: string;
  system: { name: string; version: string };
  backend: string;
  state: ExperimentState;
  state_reason: string | null;
  config: { build_overrides: Record<string, Scalar>; run_overrides: Record<string, Scalar> } | null;
  staged_inputs: Record<string, string>;
  created_at: number;
  updated_at: number;
  action_log: ActionOutcomeDoc[];
  results: Record<string, ResultEntryDoc> | null;
}

export interface BackendEntry {
  id: string;
  kind: "local" | "remote" | "cascaded";
  capacity: number | null;
  cost_tag: string;
  default?: boolean;
}
