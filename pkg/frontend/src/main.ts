// Console bootstrap: create or attach to a session, then mirror the
// envelope stream into the page. Gateway base URL and session id come from
// query parameters (?gateway=http://host:8787&session=<id>); with no
// session parameter a new one is created via POST /sessions.

import { GatewayClient, gatewayWsUrl } from "./client.js";
import { render } from "./render.js";
import type { ScenarioWire } from "./types.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

async function ensureSession(base: string): Promise<string> {
  const existing = param("session", "");
  if (existing) return existing;
  const learner = param("learner", "web-learner");
  const response = await fetch(`${base}/sessions`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ profile: { learner_id: learner } }),
  });
  if (!response.ok) throw new Error(`session create failed: ${response.status}`);
  const body = await response.json();
  return body.session_id as string;
}

async function start(): Promise<void> {
  const root = document.body;
  const base = param("gateway", "http://127.0.0.1:8787").replace(/\/$/, "");
  const assessmentToggle = document.querySelector("#show-assessment") as HTMLInputElement;

  let sessionId: string;
  try {
    sessionId = await ensureSession(base);
  } catch (error) {
    (document.querySelector("#toasts") as HTMLElement).textContent = String(error);
    return;
  }
  (document.querySelector("#session-id") as HTMLElement).textContent = sessionId;

  const client = new GatewayClient({
    url: gatewayWsUrl(base, sessionId),
    onChange: (view) =>
      render(root, view, assessmentToggle.checked, {
        onScenarioClick: (scenario: ScenarioWire) =>
          client.sendCommand({ kind: "inject_scenario", scenario }),
      }),
  });
  assessmentToggle.addEventListener("change", () =>
    render(root, client.view, assessmentToggle.checked, {
      onScenarioClick: (scenario: ScenarioWire) =>
        client.sendCommand({ kind: "inject_scenario", scenario }),
    }),
  );

  const input = document.querySelector("#learner-text") as HTMLInputElement;
  const form = document.querySelector("#learner-form") as HTMLFormElement;
  form.addEventListener("submit", (event) => {
    event.preventDefault();
    if (client.sendLearnerText(input.value)) input.value = "";
  });

  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-phase]")) {
    button.addEventListener("click", () =>
      client.sendCommand({ kind: "force_transition", phase: button.dataset.phase! }),
    );
  }
  (document.querySelector("#end-session") as HTMLButtonElement).addEventListener(
    "click",
    () => client.sendCommand({ kind: "end_session" }),
  );

  client.connect();
}

start();
