// Wire types for the session gateway: envelopes arriving over the WebSocket
// and command frames going back. Shapes mirror the gateway's JSON schema.

export const ENVELOPE_KINDS = [
  "phase_changed",
  "turn_added",
  "assessment_set",
  "scenario_set",
  "feedback_ready",
  "error",
  "ended",
] as const;

export type EnvelopeKind = (typeof ENVELOPE_KINDS)[number];

export interface Envelope {
  session_id: string;
  seq: number;
  kind: string; // validated against ENVELOPE_KINDS at render time, not here
  payload: Record<string, unknown>;
  ts: string;
}

export interface ScenarioWire {
  scenario_id: string;
  title: string;
  scene_description: string;
  agent_role: string;
  learner_role: string;
  environment_tag: string;
  difficulty: string;
}

export interface TurnWire {
  seq: number;
  role: "agent" | "learner" | "system";
  text: string;
  phase: string;
  latency_ms?: number | null;
  emotion?: string | null;
  menu?: ScenarioWire[];
  scaffold?: { kind: string; text: string };
}

export interface FeedbackWire {
  strength: string;
  improvement: string;
  advice_moving_forward: string;
  language_summary: { item: string; kind: string }[];
  incomplete: boolean;
}

export type CommandFrame =
  | { kind: "say_as_learner"; text: string }
  | { kind: "force_transition"; phase: string }
  | { kind: "end_session" }
  | { kind: "inject_scenario"; scenario: ScenarioWire };

export function isEnvelope(value: unknown): value is Envelope {
  if (typeof value !== "object" || value === null) return false;
  const maybe = value as Record<string, unknown>;
  return (
    typeof maybe.seq === "number" &&
    typeof maybe.kind === "string" &&
    typeof maybe.payload === "object" &&
    maybe.payload !== null
  );
}
