// Session flow state machine: symptoms -> guidance -> recording (per
// site, fixed order) -> review -> results. The machine owns every legal
// transition; the DOM layer only calls its methods, so "the flow cannot
// skip from symptoms to results" is enforced here rather than by screen
// wiring.

import {
  AssessmentResult,
  ServiceClient,
  ServiceError,
  Site,
  UploadReceipt,
} from "./api.js";

export const RECORDING_ORDER: readonly Site[] = ["RUL", "LUL", "LLL", "RLL"];

export type Step = "symptoms" | "guidance" | "recording" | "review" | "results";
export type SiteStatus = "pending" | "recording" | "done" | "skipped";

export interface FlowState {
  step: Step;
  sessionId: string | null;
  siteIndex: number;
  siteStatus: Record<Site, SiteStatus>;
  countdown: number;
  result: AssessmentResult | null;
  error: string | null;
  uploads: Partial<Record<Site, ArrayBuffer>>;
}

export class FlowError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "FlowError";
  }
}

type Listener = (state: FlowState) => void;

export class FlowMachine {
  private state: FlowState = initialState();
  private listeners: Listener[] = [];

  constructor(private readonly client: ServiceClient) {}

  get snapshot(): FlowState {
    return this.state;
  }

  onChange(listener: Listener): void {
    this.listeners.push(listener);
  }

  /** Site currently being recorded or guided. */
  currentSite(): Site {
    return RECORDING_ORDER[this.state.siteIndex];
  }

  completedCount(): number {
    return RECORDING_ORDER.filter(
      (s) => this.state.siteStatus[s] === "done",
    ).length;
  }

  /**
   * Fig. 3(a): create the session from the symptom selection. Empty
   * selection is allowed. On service failure the flow stays put with an
   * error banner instead of advancing.
   */
  async submitSymptoms(symptoms: string[], other = ""): Promise<void> {
    this.expect("symptoms", "submitSymptoms");
    try {
      const sessionId = await this.client.createSession(symptoms, other);
      this.update({ sessionId, step: "guidance", error: null });
    } catch (err) {
      this.update({ error: describe(err) });
      throw err;
    }
  }

  /** Guidance screen -> live recording screen for the current site. */
  startRecording(): void {
    this.expect("guidance", "startRecording");
    const site = this.currentSite();
    this.update({
      step: "recording",
      siteStatus: { ...this.state.siteStatus, [site]: "recording" },
      countdown: 10,
    });
  }

  /**
   * Track the capture countdown without notifying listeners - the
   * recording screen updates its timer in place, and a full re-render
   * every second would wipe the live waveform.
   */
  setCountdown(seconds: number): void {
    if (this.state.step === "recording") {
      this.state = { ...this.state, countdown: seconds };
    }
  }

  /**
   * Upload the captured clip for the current site. On success the flow
   * advances to the next site's guidance, or onward when this was the
   * last site. Returns the receipt so the caller can surface quality
   * flags. Failures leave the site pending for a re-record/retry.
   */
  async completeSite(wavBytes: ArrayBuffer): Promise<UploadReceipt> {
    this.expect("recording", "completeSite");
    const site = this.currentSite();
    if (!this.state.sessionId) {
      throw new FlowError("no session");
    }
    try {
      const receipt = await this.client.uploadRecording(
        this.state.sessionId,
        site,
        wavBytes,
      );
      this.update({
        siteStatus: { ...this.state.siteStatus, [site]: "done" },
        uploads: { ...this.state.uploads, [site]: wavBytes },
        error: null,
      });
      await this.advanceAfterSite();
      return receipt;
    } catch (err) {
      // TooShort/BadAudio ask for a re-record; anything else is a retry
      this.update({
        siteStatus: { ...this.state.siteStatus, [site]: "recording" },
        error: describe(err),
      });
      throw err;
    }
  }

  /** Give up on the current site's upload and return to its guidance. */
  retrySite(): void {
    this.expect("recording", "retrySite");
    const site = this.currentSite();
    this.update({
      step: "guidance",
      siteStatus: { ...this.state.siteStatus, [site]: "pending" },
    });
  }

  /**
   * Skip the current site (allowed but warned; a partial session is
   * still assessable as long as one site made it).
   */
  skipSite(): void {
    if (this.state.step !== "guidance" && this.state.step !== "recording") {
      throw new FlowError(`cannot skip during ${this.state.step}`);
    }
    const site = this.currentSite();
    this.update({
      siteStatus: { ...this.state.siteStatus, [site]: "skipped" },
    });
    void this.advanceAfterSite();
  }

  /**
   * Review screen -> assessment. Guarded twice: the step must be review,
   * and at least one site must have uploaded successfully.
   */
  async submitForAssessment(): Promise<AssessmentResult> {
    this.expect("review", "submitForAssessment");
    return this.assess();
  }

  private async advanceAfterSite(): Promise<void> {
    const next = this.state.siteIndex + 1;
    if (next < RECORDING_ORDER.length) {
      this.update({ step: "guidance", siteIndex: next });
      return;
    }
    // all four sites visited: assess automatically when every one
    // uploaded, otherwise show the review screen for the partial session
    if (this.completedCount() === RECORDING_ORDER.length) {
      await this.assess();
    } else {
      this.update({ step: "review" });
    }
  }

  private async assess(): Promise<AssessmentResult> {
    if (this.completedCount() < 1) {
      throw new FlowError("assessment needs at least one uploaded site");
    }
    if (!this.state.sessionId) {
      throw new FlowError("no session");
    }
    try {
      const result = await this.client.assess(this.state.sessionId);
      this.update({ step: "results", result, error: null });
      return result;
    } catch (err) {
      this.update({ error: describe(err) });
      throw err;
    }
  }

  private expect(step: Step, operation: string): void {
    if (this.state.step !== step) {
      throw new FlowError(
        `${operation} is only valid in the ${step} step (currently ${this.state.step})`,
      );
    }
  }

  private update(patch: Partial<FlowState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }
}

function initialState(): FlowState {
  return {
    step: "symptoms",
    sessionId: null,
    siteIndex: 0,
    siteStatus: { RUL: "pending", LUL: "pending", LLL: "pending", RLL: "pending" },
    countdown: 10,
    result: null,
    error: null,
    uploads: {},
  };
}

function describe(err: unknown): string {
  if (err instanceof ServiceError) {
    return `${err.code}: ${err.message}`;
  }
  return String(err);
}
