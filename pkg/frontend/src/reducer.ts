// The console view is a pure fold over the envelope stream: replaying a
// recorded stream always reproduces the identical view. Envelopes already
// seen (seq <= lastSeq) are dropped; a sequence jump is flagged so the
// client can resume from the last good position instead of showing a gap.

import type { Envelope, FeedbackWire, ScenarioWire, TurnWire } from "./types.js";

export type Connection = "live" | "reconnecting" | "closed";

export interface Rejection {
  message: string;
  from?: string;
  to?: string;
}

export interface EventRow {
  seq: number;
  kind: string;
  label: string;
  ts: string;
}

export interface ConsoleSessionView {
  sessionId: string | null;
  phase: string;
  assessedLevel: string | null;
  assessmentProvisional: boolean;
  activeScenario: ScenarioWire | null;
  transcript: TurnWire[];
  menu: ScenarioWire[];
  feedback: FeedbackWire | null;
  rejections: Rejection[];
  events: EventRow[];
  lastSeq: number;
  gapFrom: number | null;
  ended: boolean;
  connection: Connection;
}

export function initialView(): ConsoleSessionView {
  return {
    sessionId: null,
    phase: "Introduction",
    assessedLevel: null,
    assessmentProvisional: false,
    activeScenario: null,
    transcript: [],
    menu: [],
    feedback: null,
    rejections: [],
    events: [],
    lastSeq: 0,
    gapFrom: null,
    ended: false,
    connection: "closed",
  };
}

function labelFor(envelope: Envelope): string {
  const payload = envelope.payload as Record<string, unknown>;
  switch (envelope.kind) {
    case "phase_changed":
      return `phase ${payload.from} → ${payload.to}`;
    case "turn_added":
      return `${payload.role}: ${String(payload.text ?? "").slice(0, 80)}`;
    case "assessment_set":
      return `assessment ${payload.level}${payload.sufficient ? "" : " (provisional)"}`;
    case "scenario_set":
      return `scenario: ${payload.title}`;
    case "feedback_ready":
      return "feedback ready";
    case "error":
      return `error: ${payload.message}`;
    case "ended":
      return "session ended";
    default:
      return `unknown event (${envelope.kind})`;
  }
}

export function applyEnvelope(
  view: ConsoleSessionView,
  envelope: Envelope,
): ConsoleSessionView {
  // seq 0 marks a client-only frame (e.g. a bad-command error): rendered,
  // never counted against the session sequence
  if (envelope.seq !== 0) {
    if (envelope.seq <= view.lastSeq) return view; // duplicate after reconnect
    if (envelope.seq > view.lastSeq + 1) {
      return { ...view, gapFrom: view.lastSeq };
    }
  }

  const next: ConsoleSessionView = {
    ...view,
    sessionId: envelope.session_id || view.sessionId,
    lastSeq: envelope.seq === 0 ? view.lastSeq : envelope.seq,
    gapFrom: null,
    events: [
      ...view.events,
      { seq: envelope.seq, kind: envelope.kind, label: labelFor(envelope), ts: envelope.ts },
    ],
  };
  const payload = envelope.payload as Record<string, unknown>;

  switch (envelope.kind) {
    case "phase_changed":
      next.phase = String(payload.to);
      return next;
    case "turn_added": {
      const turn = payload as unknown as TurnWire;
      next.transcript = [...view.transcript, turn];
      if (turn.menu && turn.menu.length > 0) {
        next.menu = turn.menu;
      }
      return next;
    }
    case "assessment_set":
      next.assessedLevel = String(payload.level);
      next.assessmentProvisional = payload.sufficient === false;
      return next;
    case "scenario_set":
      next.activeScenario = payload as unknown as ScenarioWire;
      next.menu = [];
      return next;
    case "feedback_ready":
      next.feedback = payload as unknown as FeedbackWire;
      return next;
    case "error": {
      const rejection: Rejection = { message: String(payload.message ?? "error") };
      if (typeof payload.from === "string") rejection.from = payload.from;
      if (typeof payload.to === "string") rejection.to = payload.to;
      next.rejections = [...view.rejections, rejection];
      return next;
    }
    case "ended":
      next.ended = true;
      next.phase = "Ended";
      return next;
    default:
      // unknown kinds still produced an "unknown event" row above
      return next;
  }
}

export function foldStream(
  envelopes: Envelope[],
  from: ConsoleSessionView = initialView(),
): ConsoleSessionView {
  return envelopes.reduce(applyEnvelope, from);
}
