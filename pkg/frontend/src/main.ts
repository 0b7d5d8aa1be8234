// Screen rendering and wiring. Each flow step renders into #app from the
// FlowMachine's state; user actions call back into the machine or the
// recorder. All clinical wording lives here - the enums come verbatim
// from the service.

import { ServiceClient, ServiceError, Site, SYMPTOMS } from "./api.js";
import { serviceBaseUrl } from "./config.js";
import { FlowMachine, FlowState, RECORDING_ORDER } from "./flow.js";
import { AudioFrameSource, MicrophoneSource, Recorder } from "./recorder.js";
import { encodeWavPcm16 } from "./wav.js";
import { WaveformRenderer } from "./waveform.js";

const SYMPTOM_LABELS: Record<string, string> = {
  fever: "Fever (37.8°C or higher)",
  cough: "Cough",
  sputum: "Sputum",
  runny_nose: "Runny Nose",
  breathing_difficulty: "Breathing Difficulty",
  chest_pain: "Chest Pain",
};

// RUL/LUL are auscultated on the chest, the lower lobes from the back.
const SITE_GUIDANCE: Record<Site, string> = {
  RUL: "Right upper lobe - place the phone on the upper right chest.",
  LUL: "Left upper lobe - place the phone on the upper left chest.",
  LLL: "Left lower lobe - place the phone on the lower left back.",
  RLL: "Right lower lobe - place the phone on the lower right back.",
};

const EXAMPLE_SOUNDS = [
  { label: "Crackle", file: "assets/example_crackle.wav" },
  { label: "Wheeze", file: "assets/example_wheeze.wav" },
];

export interface AppOptions {
  client?: ServiceClient;
  sourceFactory?: () => AudioFrameSource;
  recordSeconds?: number;
}

export class App {
  private readonly client: ServiceClient;
  private readonly flow: FlowMachine;
  private readonly sourceFactory: () => AudioFrameSource;
  private readonly recordSeconds: number;
  private recorder: Recorder | null = null;
  private pendingRetry: ArrayBuffer | null = null;

  constructor(
    private readonly root: HTMLElement,
    opts: AppOptions = {},
  ) {
    this.client =
      opts.client ?? new ServiceClient(serviceBaseUrl(root.ownerDocument));
    this.flow = new FlowMachine(this.client);
    this.sourceFactory = opts.sourceFactory ?? (() => new MicrophoneSource());
    this.recordSeconds = opts.recordSeconds ?? 10;
    this.flow.onChange(() => this.render());
  }

  get machine(): FlowMachine {
    return this.flow;
  }

  start(): void {
    this.render();
  }

  private render(): void {
    const state = this.flow.snapshot;
    this.root.innerHTML = "";
    const banner = this.errorBanner(state);
    if (banner) {
      this.root.appendChild(banner);
    }
    switch (state.step) {
      case "symptoms":
        this.renderSymptoms();
        break;
      case "guidance":
        this.renderGuidance(state);
        break;
      case "recording":
        this.renderRecording(state);
        break;
      case "review":
        this.renderReview(state);
        break;
      case "results":
        this.renderResults(state);
        break;
    }
  }

  private errorBanner(state: FlowState): HTMLElement | null {
    if (!state.error) {
      return null;
    }
    const div = el("div", "banner error");
    div.setAttribute("data-testid", "error-banner");
    div.textContent = state.error;
    return div;
  }

  // ---- Fig. 3(a): symptom selection -------------------------------

  private renderSymptoms(): void {
    const screen = el("section", "screen symptoms");
    screen.appendChild(heading("How is the child feeling?"));
    const form = el("form");
    for (const symptom of SYMPTOMS) {
      const label = el("label", "symptom");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.name = "symptom";
      box.value = symptom;
      label.appendChild(box);
      label.appendChild(text(SYMPTOM_LABELS[symptom] ?? symptom));
      form.appendChild(label);
    }
    const other = document.createElement("input");
    other.type = "text";
    other.name = "other";
    other.placeholder = "Others";
    form.appendChild(other);

    const next = button("Continue", "continue");
    next.type = "submit";
    form.appendChild(next);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const chosen = Array.from(
        form.querySelectorAll<HTMLInputElement>("input[name=symptom]:checked"),
      ).map((i) => i.value);
      void this.flow.submitSymptoms(chosen, other.value.trim()).catch(() => {
        // the machine keeps the flow on this screen; banner already shown
      });
    });
    screen.appendChild(form);
    this.root.appendChild(screen);
  }

  // ---- Fig. 3(b): site guidance ------------------------------------

  private renderGuidance(state: FlowState): void {
    const site = this.flow.currentSite();
    const screen = el("section", "screen guidance");
    screen.appendChild(
      heading(`Recording position ${state.siteIndex + 1} of 4: ${site}`),
    );
    const tip = el("p", "guidance-text");
    tip.textContent = SITE_GUIDANCE[site];
    screen.appendChild(tip);

    const start = button("Start Recording", "start-recording");
    start.addEventListener("click", () => {
      this.flow.startRecording();
      void this.captureCurrentSite();
    });
    screen.appendChild(start);

    const skip = button("Skip this site", "skip-site");
    skip.addEventListener("click", () => {
      console.warn(
        "Skipping a site reduces coverage; the assessment works best with all four.",
      );
      this.flow.skipSite();
    });
    screen.appendChild(skip);
    this.root.appendChild(screen);
  }

  // ---- Fig. 3(c): live recording -----------------------------------

  private renderRecording(state: FlowState): void {
    const site = this.flow.currentSite();
    const screen = el("section", "screen recording");
    screen.appendChild(heading(`Recording ${site}...`));

    const timer = el("div", "timer");
    timer.setAttribute("data-testid", "timer");
    timer.textContent = formatSeconds(state.countdown);
    screen.appendChild(timer);

    const canvas = document.createElement("canvas");
    canvas.width = 480;
    canvas.height = 96;
    canvas.setAttribute("data-testid", "waveform");
    screen.appendChild(canvas);

    if (this.pendingRetry) {
      const again = button("Re-record", "re-record");
      again.addEventListener("click", () => {
        this.pendingRetry = null;
        this.flow.retrySite();
      });
      screen.appendChild(again);
      const retry = button("Retry upload", "retry-upload");
      retry.addEventListener("click", () => {
        const bytes = this.pendingRetry;
        this.pendingRetry = null;
        if (bytes) {
          void this.uploadCapture(bytes);
        }
      });
      screen.appendChild(retry);
    } else {
      const stop = button("Stop early", "stop-early");
      stop.addEventListener("click", () => this.recorder?.stop());
      screen.appendChild(stop);
    }
    this.root.appendChild(screen);
    this.waveform = new WaveformRenderer(canvas);
  }

  private waveform: WaveformRenderer | null = null;

  private async captureCurrentSite(): Promise<void> {
    const recorder = new Recorder(this.sourceFactory(), this.recordSeconds);
    this.recorder = recorder;
    this.render(); // recording screen with live canvas
    try {
      const capture = await recorder.start({
        onLevel: (peak) => this.waveform?.push(peak),
        onTick: (remaining) => {
          this.flow.setCountdown(remaining);
          const timer = this.root.querySelector('[data-testid="timer"]');
          if (timer) {
            timer.textContent = formatSeconds(remaining);
          }
        },
      });
      this.recorder = null;
      const wav = encodeWavPcm16(capture.samples, capture.sampleRate);
      await this.uploadCapture(wav);
    } catch (err) {
      this.recorder = null;
      if (!(err instanceof ServiceError)) {
        // microphone failure: instructional message, stay on the screen
        this.flow.setCountdown(this.recordSeconds);
        console.error("capture failed", err);
      }
    }
  }

  private async uploadCapture(wav: ArrayBuffer): Promise<void> {
    try {
      await this.flow.completeSite(wav);
      this.pendingRetry = null;
    } catch (err) {
      if (
        err instanceof ServiceError &&
        (err.code === "TooShortError" || err.code === "BadAudioError")
      ) {
        this.pendingRetry = null; // bad capture: only a re-record helps
        this.flow.retrySite();
      } else {
        this.pendingRetry = wav; // transient: keep the audio for retry
        this.render();
      }
    }
  }

  // ---- review (partial sessions) -----------------------------------

  private renderReview(state: FlowState): void {
    const screen = el("section", "screen review");
    screen.appendChild(heading("Review before assessment"));
    const list = el("ul", "site-list");
    for (const site of RECORDING_ORDER) {
      const item = el("li");
      item.textContent = `${site}: ${state.siteStatus[site]}`;
      list.appendChild(item);
    }
    screen.appendChild(list);
    if (this.flow.completedCount() === 0) {
      const note = el("p", "warning");
      note.textContent =
        "No sites were recorded - at least one recording is needed.";
      screen.appendChild(note);
    } else {
      const submit = button("Get assessment", "submit-assessment");
      submit.addEventListener("click", () => {
        void this.flow.submitForAssessment().catch(() => {});
      });
      screen.appendChild(submit);
    }
    this.root.appendChild(screen);
  }

  // ---- Fig. 3(d): results ------------------------------------------

  private renderResults(state: FlowState): void {
    const result = state.result;
    if (!result) {
      return;
    }
    const screen = el("section", "screen results");
    const abnormal = result.overall_verdict === "abnormal";
    screen.appendChild(
      heading(abnormal ? "An Abnormal Sound was Detected" : "No Abnormal Sounds Detected"),
    );

    // the enum value itself, verbatim, for unambiguous display
    const verdict = el("div", `verdict ${result.overall_verdict}`);
    verdict.setAttribute("data-testid", "verdict");
    verdict.textContent = result.overall_verdict;
    screen.appendChild(verdict);

    if (result.recommendation === "consult_physician") {
      const advice = el("p", "advice");
      advice.setAttribute("data-testid", "advice");
      advice.textContent =
        "Abnormal lung sounds were detected. Please consult a physician.";
      screen.appendChild(advice);
    }

    const sites = el("ul", "site-results");
    for (const site of RECORDING_ORDER) {
      const block = result.sites[site];
      const item = el("li");
      item.setAttribute("data-site", site);
      if (block) {
        item.textContent = `${site}: p(abnormal) = ${block.p_abnormal.toFixed(2)}`;
        const replay = button("Listen Again", `replay-${site}`);
        replay.addEventListener("click", () => this.replay(site));
        item.appendChild(replay);
      } else {
        item.textContent = `${site}: not recorded`;
      }
      sites.appendChild(item);
    }
    screen.appendChild(sites);

    const examples = el("div", "examples");
    for (const example of EXAMPLE_SOUNDS) {
      const play = button(
        `Play Example: ${example.label}`,
        `example-${example.label.toLowerCase()}`,
      );
      play.addEventListener("click", () => {
        void new Audio(example.file).play();
      });
      examples.appendChild(play);
    }
    screen.appendChild(examples);
    this.root.appendChild(screen);
  }

  private replay(site: Site): void {
    const bytes = this.flow.snapshot.uploads[site];
    if (!bytes || typeof URL.createObjectURL !== "function") {
      return;
    }
    const url = URL.createObjectURL(new Blob([bytes], { type: "audio/wav" }));
    const audio = new Audio(url);
    audio.addEventListener("ended", () => URL.revokeObjectURL(url));
    void audio.play();
  }
}

// ---- tiny DOM helpers ----------------------------------------------

function el(tag: string, className = ""): HTMLElement {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  return node;
}

function heading(label: string): HTMLElement {
  const h = el("h1");
  h.textContent = label;
  return h;
}

function button(label: string, testId: string): HTMLButtonElement {
  const b = document.createElement("button");
  b.type = "button";
  b.textContent = label;
  b.setAttribute("data-testid", testId);
  return b;
}

function text(value: string): Text {
  return document.createTextNode(value);
}

function formatSeconds(seconds: number): string {
  return `00:${String(Math.max(0, seconds)).padStart(2, "0")}`;
}

// auto-start only in a real page, not when imported by tests
if (typeof document !== "undefined") {
  const root = document.getElementById("app");
  if (root) {
    new App(root).start();
  }
}
