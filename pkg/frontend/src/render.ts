// DOM rendering for the console view. Pure text formatters live at the top
// (tested without a browser); the render() function below only writes DOM.

import type { ConsoleSessionView, Rejection } from "./reducer.js";
import type { FeedbackWire, ScenarioWire } from "./types.js";

export function feedbackText(feedback: FeedbackWire): string {
  const lines = [
    "GENERAL FEEDBACK",
    `Strength: ${feedback.strength}`,
    `Improvement: ${feedback.improvement}`,
    "ADVICE MOVING FORWARD",
    feedback.advice_moving_forward,
    "LANGUAGE SUMMARY",
    ...feedback.language_summary.map((item) => `- ${item.kind}: ${item.item}`),
  ];
  if (feedback.incomplete) lines.push("(report incomplete)");
  return lines.join("\n");
}

export function rejectionText(rejection: Rejection): string {
  if (rejection.from && rejection.to) {
    return `${rejection.message} (${rejection.from} → ${rejection.to})`;
  }
  return rejection.message;
}

export function scenarioLabel(scenario: ScenarioWire, index: number): string {
  return `${index + 1}. ${scenario.title} [${scenario.environment_tag}, ${scenario.difficulty}]`;
}

export function connectionLabel(view: ConsoleSessionView): string {
  return view.connection;
}

function el(tag: string, className: string, text?: string): HTMLElement {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export interface RenderCallbacks {
  onScenarioClick: (scenario: ScenarioWire) => void;
}

export function render(
  root: HTMLElement,
  view: ConsoleSessionView,
  showAssessment: boolean,
  callbacks: RenderCallbacks,
): void {
  const badges = root.querySelector("#badges") as HTMLElement;
  badges.replaceChildren(
    el("span", `badge conn-${view.connection}`, view.connection),
    el("span", "badge phase", view.phase),
  );
  if (showAssessment && view.assessedLevel) {
    const label = view.assessmentProvisional
      ? `${view.assessedLevel} (provisional)`
      : view.assessedLevel;
    badges.appendChild(el("span", "badge level", `CEFR ${label}`));
  }
  if (view.activeScenario) {
    badges.appendChild(el("span", "badge scenario", view.activeScenario.title));
  }

  const transcript = root.querySelector("#transcript") as HTMLElement;
  transcript.replaceChildren(
    ...view.transcript.map((turn) => {
      const row = el("div", `turn turn-${turn.role}`);
      row.appendChild(el("span", "who", turn.role));
      row.appendChild(el("span", "what", turn.text));
      if (turn.latency_ms) row.appendChild(el("span", "latency", `${turn.latency_ms} ms`));
      if (turn.emotion && turn.emotion !== "neutral") {
        row.appendChild(el("span", "emotion", turn.emotion));
      }
      return row;
    }),
  );
  transcript.scrollTop = transcript.scrollHeight;

  const menu = root.querySelector("#menu") as HTMLElement;
  menu.replaceChildren(
    ...view.menu.map((scenario, index) => {
      const button = el("button", "scenario-option", scenarioLabel(scenario, index));
      button.title = scenario.scene_description;
      button.addEventListener("click", () => callbacks.onScenarioClick(scenario));
      return button;
    }),
  );

  const feedback = root.querySelector("#feedback") as HTMLElement;
  feedback.replaceChildren();
  if (view.feedback) {
    const pre = el("pre", "feedback-report", feedbackText(view.feedback));
    feedback.appendChild(pre);
  }

  const toasts = root.querySelector("#toasts") as HTMLElement;
  toasts.replaceChildren(
    ...view.rejections.slice(-3).map((r) => el("div", "toast", rejectionText(r))),
  );

  const events = root.querySelector("#events") as HTMLElement;
  events.replaceChildren(
    ...view.events.slice(-50).map((row) => {
      const line = el("div", `event event-${row.kind}`);
      line.appendChild(el("span", "seq", row.seq ? `#${row.seq}` : "·"));
      line.appendChild(el("span", "label", row.label));
      return line;
    }),
  );

  const input = root.querySelector("#learner-text") as HTMLInputElement;
  input.disabled = view.ended || view.connection !== "live";
}
