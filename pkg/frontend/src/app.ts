/**
 * Single-page reader-study app: one case on screen, two commits per case,
 * assistance strictly after the first commit, questionnaire at the end.
 */

import { ApiError, ReaderStudyApi } from "./api";
import {
  CaseDraft,
  DraftStore,
  emptyDraft,
  isQuestionnaireDone,
  loadSession,
  markQuestionnaireDone,
  saveSession,
} from "./storage";
import {
  AssistanceView,
  CasePointer,
  CompletedReading,
  isLikert,
  RankedEntry,
  RATING_COMPONENTS,
  RATING_LABELS,
  RatingComponent,
} from "./types";

/** Diagnosis picker entries; deployments can swap in their own class list. */
export const DEFAULT_DIAGNOSIS_OPTIONS: readonly string[] = [
  "normal fundus",
  "dry age-related macular degeneration",
  "wet age-related macular degeneration",
  "polypoidal choroidal vasculopathy",
  "mild nonproliferative diabetic retinopathy",
  "moderate nonproliferative diabetic retinopathy",
  "severe nonproliferative diabetic retinopathy",
  "proliferative diabetic retinopathy",
  "diabetic macular edema",
  "retinal vein occlusion",
  "retinal artery occlusion",
  "central serous chorioretinopathy",
  "epiretinal membrane",
  "macular hole",
  "pathologic myopia",
  "glaucoma suspect",
  "retinal detachment",
  "retinitis pigmentosa",
  "chorioretinal atrophy",
  "hypertensive retinopathy",
  "other disease",
];

export interface QuestionnaireItem {
  key: string;
  label: string;
}

/** Exact wording is a deployment choice; these are reasonable defaults. */
export const DEFAULT_QUESTIONNAIRE_ITEMS: readonly QuestionnaireItem[] = [
  { key: "overall_usefulness", label: "Overall usefulness of the assistance" },
  { key: "confidence_impact", label: "Impact on your diagnostic confidence" },
  { key: "workflow_fit", label: "Fit with your usual reading workflow" },
  { key: "heatmap_clarity", label: "Clarity of the heatmap overlay" },
  { key: "future_use", label: "Willingness to use the assistance in practice" },
];

export interface AppOptions {
  storage?: Storage;
  diagnosisOptions?: readonly string[];
  questionnaireItems?: readonly QuestionnaireItem[];
}

type Phase = "signin" | "stage1" | "stage2" | "review" | "questionnaire" | "done";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  props: Partial<HTMLElementTagNameMap[K]> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  Object.assign(node, props);
  node.append(...children);
  return node;
}

function field(labelText: string, control: HTMLElement): HTMLElement {
  const wrap = el("div", { className: "field" });
  const label = el("label", { textContent: labelText });
  if (control.id !== "") {
    label.htmlFor = control.id;
  }
  wrap.append(label, control);
  return wrap;
}

function rankedList(id: string, title: string, entries: RankedEntry[]): HTMLElement {
  const box = el("div", { className: "ranked" });
  box.append(el("h3", { textContent: title }));
  const list = el("ol", { id });
  for (const entry of entries) {
    list.append(el("li", {}, `${entry.name} — ${entry.score.toFixed(3)}`));
  }
  box.append(list);
  return box;
}

function describeError(err: unknown): string {
  if (err instanceof ApiError) {
    return err.status === 0
      ? `Could not reach the study service — ${err.message}`
      : `The service rejected the request (${err.status}): ${err.message}`;
  }
  return String(err);
}

export class ReaderApp {
  private readonly root: HTMLElement;
  private readonly api: ReaderStudyApi;
  private readonly storage: Storage;
  private readonly diagnosisOptions: readonly string[];
  private readonly questionnaireItems: readonly QuestionnaireItem[];

  private token = "";
  private nCases = 0;
  private drafts: DraftStore | null = null;

  private phase: Phase = "signin";
  private signinValue = "";
  private current: CasePointer | null = null;
  private draft: CaseDraft = emptyDraft();
  private assistance: AssistanceView | null = null;
  private readonly history: CompletedReading[] = [];
  private reviewIndex = 0;
  private questionnaireAnswers: Record<string, number> = {};

  private banner: string | null = null;
  private retry: (() => Promise<void>) | null = null;
  private busy = false;
  private pending: Promise<void> | null = null;

  private zoom = 1;
  private panX = 0;
  private panY = 0;
  private overlayOpacity = 0.6;
  private viewportEl: HTMLElement | null = null;

  constructor(root: HTMLElement, api: ReaderStudyApi, options: AppOptions = {}) {
    this.root = root;
    this.api = api;
    this.storage = options.storage ?? window.localStorage;
    this.diagnosisOptions = options.diagnosisOptions ?? DEFAULT_DIAGNOSIS_OPTIONS;
    this.questionnaireItems = options.questionnaireItems ?? DEFAULT_QUESTIONNAIRE_ITEMS;
  }

  /** Restore a persisted session if one exists, otherwise show sign-in. */
  async start(): Promise<void> {
    const saved = loadSession(this.storage);
    if (saved === null) {
      this.phase = "signin";
      this.render();
      return;
    }
    this.token = saved.token;
    this.nCases = saved.nCases;
    this.drafts = new DraftStore(this.storage, this.token);
    await this.track(this.advanceFlow());
  }

  /** Settles once every in-flight service round-trip has finished. */
  async idle(): Promise<void> {
    while (this.pending !== null) {
      await this.pending;
    }
  }

  private track(op: Promise<void>): Promise<void> {
    const tracked = op.finally(() => {
      if (this.pending === tracked) {
        this.pending = null;
      }
    });
    this.pending = tracked;
    return tracked;
  }

  /**
   * Runs one service round-trip with the retry-banner contract: on failure
   * the entered form state is untouched and the banner offers `retry`.
   */
  private async guarded(work: () => Promise<void>, retry: () => Promise<void>): Promise<boolean> {
    if (this.busy) {
      return false;
    }
    this.busy = true;
    this.banner = null;
    this.retry = null;
    this.render();
    let ok = false;
    try {
      await work();
      ok = true;
    } catch (err) {
      this.banner = describeError(err);
      this.retry = retry;
    } finally {
      this.busy = false;
      this.render();
    }
    return ok;
  }

  private async signInFlow(): Promise<void> {
    const participantId = this.signinValue.trim();
    if (participantId === "") {
      return;
    }
    const ok = await this.guarded(async () => {
      const info = await this.api.startSession(participantId);
      this.token = info.token;
      this.nCases = info.nCases;
      saveSession(this.storage, { token: info.token, participantId, nCases: info.nCases });
      this.drafts = new DraftStore(this.storage, this.token);
    }, () => this.signInFlow());
    if (ok) {
      await this.advanceFlow();
    }
  }

  /** Moves to whatever the service says is next: a case or the questionnaire. */
  private async advanceFlow(): Promise<void> {
    const ok = await this.guarded(async () => {
      const next = await this.api.nextCase(this.token);
      if (next === null) {
        this.current = null;
        this.phase = isQuestionnaireDone(this.storage, this.token) ? "done" : "questionnaire";
        return;
      }
      this.current = next;
      this.draft = this.drafts?.load(next.caseId) ?? emptyDraft();
      this.assistance = null;
      this.zoom = 1;
      this.panX = 0;
      this.panY = 0;
      this.phase = this.draft.stage1Committed ? "stage2" : "stage1";
    }, () => this.advanceFlow());
    if (ok && this.phase === "stage2" && this.assistance === null) {
      await this.loadAssistance();
    }
  }

  private async commitStage1Flow(): Promise<void> {
    if (!this.stage1Ready() || this.current === null || this.drafts === null) {
      return;
    }
    const caseId = this.current.caseId;
    const ok = await this.guarded(async () => {
      await this.api.commitStage1(
        this.token,
        caseId,
        this.draft.stage1.diagnosis,
        this.draft.stage1.confidence,
      );
      this.draft.stage1Committed = true;
      if (this.draft.stage2.diagnosis === "") {
        this.draft.stage2.diagnosis = this.draft.stage1.diagnosis;
      }
      this.persistDraft();
      this.phase = "stage2";
      this.assistance = null;
    }, () => this.commitStage1Flow());
    if (ok) {
      await this.loadAssistance();
    }
  }

  /** Fetching is retried on its own; re-sending stage 1 would be a protocol error. */
  private async loadAssistance(): Promise<void> {
    if (this.current === null) {
      return;
    }
    const caseId = this.current.caseId;
    await this.guarded(async () => {
      this.assistance = await this.api.fetchAssistance(this.token, caseId);
    }, () => this.loadAssistance());
  }

  private async commitStage2Flow(): Promise<void> {
    const ratings = this.stage2Ratings();
    if (
      !this.stage2Ready() ||
      ratings === null ||
      this.current === null ||
      this.assistance === null ||
      this.drafts === null
    ) {
      return;
    }
    const current = this.current;
    const assistance = this.assistance;
    const form = this.draft.stage2;
    let sessionComplete = false;
    const ok = await this.guarded(async () => {
      sessionComplete = await this.api.commitStage2(
        this.token,
        current.caseId,
        form.diagnosis,
        form.confidence,
        ratings,
      );
    }, () => this.commitStage2Flow());
    if (!ok) {
      return;
    }
    this.history.push({
      caseId: current.caseId,
      image: current.image,
      stage1: { ...this.draft.stage1 },
      stage2: { diagnosis: form.diagnosis, confidence: form.confidence, ratings },
      assistance,
    });
    this.drafts.clear(current.caseId);
    this.current = null;
    this.assistance = null;
    this.draft = emptyDraft();
    if (sessionComplete) {
      this.phase = "questionnaire";
      this.render();
    } else {
      await this.advanceFlow();
    }
  }

  private async submitQuestionnaireFlow(): Promise<void> {
    if (!this.questionnaireReady()) {
      return;
    }
    const answers = { ...this.questionnaireAnswers };
    const ok = await this.guarded(async () => {
      await this.api.submitQuestionnaire(this.token, answers);
    }, () => this.submitQuestionnaireFlow());
    if (ok) {
      markQuestionnaireDone(this.storage, this.token);
      this.phase = "done";
      this.render();
    }
  }

  private stage1Ready(): boolean {
    return this.draft.stage1.diagnosis !== "" && isLikert(this.draft.stage1.confidence);
  }

  private stage2Ratings(): Record<RatingComponent, number> | null {
    const out = {} as Record<RatingComponent, number>;
    for (const component of RATING_COMPONENTS) {
      const value = this.draft.stage2.ratings[component];
      if (value === undefined || !isLikert(value)) {
        return null;
      }
      out[component] = value;
    }
    return out;
  }

  private stage2Ready(): boolean {
    return (
      this.draft.stage2.diagnosis !== "" &&
      isLikert(this.draft.stage2.confidence) &&
      this.stage2Ratings() !== null
    );
  }

  private questionnaireReady(): boolean {
    return this.questionnaireItems.every((item) =>
      isLikert(this.questionnaireAnswers[item.key] ?? 0),
    );
  }

  private persistDraft(): void {
    if (this.drafts !== null && this.current !== null) {
      this.drafts.save(this.current.caseId, this.draft);
    }
  }

  private openReview(index: number): void {
    this.reviewIndex = index;
    this.phase = "review";
    this.render();
  }

  private closeReview(): void {
    if (this.current !== null) {
      this.phase = this.draft.stage1Committed ? "stage2" : "stage1";
    } else {
      this.phase = isQuestionnaireDone(this.storage, this.token) ? "done" : "questionnaire";
    }
    this.render();
  }

  // ---------------------------------------------------------------- rendering

  private render(): void {
    this.viewportEl = null;
    const app = el("div", { className: "app" });
    if (this.phase !== "signin") {
      app.append(this.renderHeader());
    }
    if (this.banner !== null) {
      app.append(this.renderBanner());
    }
    switch (this.phase) {
      case "signin":
        app.append(this.renderSignin());
        break;
      case "stage1":
        app.append(this.renderStage1());
        break;
      case "stage2":
        app.append(this.renderStage2());
        break;
      case "review":
        app.append(this.renderReview());
        break;
      case "questionnaire":
        app.append(this.renderQuestionnaire());
        break;
      case "done":
        app.append(this.renderDone());
        break;
    }
    this.root.replaceChildren(app);
  }

  /** Refreshes button gating in place so typing never rebuilds the view. */
  private syncControls(): void {
    const gate = (id: string, enabled: boolean): void => {
      const button = this.root.querySelector<HTMLButtonElement>(`#${id}`);
      if (button !== null) {
        button.disabled = this.busy || !enabled;
      }
    };
    gate("signin-button", this.signinValue.trim() !== "");
    gate("stage1-submit", this.stage1Ready());
    gate("stage2-submit", this.stage2Ready());
    gate("questionnaire-submit", this.questionnaireReady());
  }

  private renderHeader(): HTMLElement {
    const header = el("header", { className: "topbar" });
    const total = this.current !== null ? this.current.total : this.nCases;
    const completed = this.current !== null ? this.current.index : this.nCases;
    header.append(
      el("span", { id: "progress", textContent: `${completed} of ${total} cases complete` }),
    );
    let stageText = "";
    if (this.phase === "stage1" && this.current !== null) {
      stageText = `Case ${this.current.index + 1}: first read — no assistance`;
    } else if (this.phase === "stage2" && this.current !== null) {
      stageText = `Case ${this.current.index + 1}: assisted review`;
    } else if (this.phase === "review") {
      stageText = "Reviewing a completed case (read-only)";
    } else if (this.phase === "questionnaire") {
      stageText = "Exit questionnaire";
    } else if (this.phase === "done") {
      stageText = "Session complete";
    }
    header.append(el("span", { id: "stage-indicator", textContent: stageText }));
    if (this.history.length > 0) {
      const nav = el("nav", { id: "history-nav" });
      nav.append(el("span", { textContent: "Completed:" }));
      this.history.forEach((reading, index) => {
        const chip = el("button", {
          type: "button",
          id: `review-chip-${index}`,
          textContent: reading.caseId,
          disabled: this.busy,
        });
        chip.addEventListener("click", () => this.openReview(index));
        nav.append(chip);
      });
      header.append(nav);
    }
    const gateButton = el("button", {
      id: "questionnaire-button",
      type: "button",
      textContent: "Questionnaire",
    });
    gateButton.disabled =
      this.busy ||
      this.current !== null ||
      this.phase === "questionnaire" ||
      this.phase === "done" ||
      isQuestionnaireDone(this.storage, this.token);
    gateButton.title =
      this.current !== null
        ? "Unlocks once all cases are complete"
        : "Open the exit questionnaire";
    gateButton.addEventListener("click", () => {
      this.phase = "questionnaire";
      this.render();
    });
    header.append(gateButton);
    return header;
  }

  private renderBanner(): HTMLElement {
    const banner = el("div", { id: "retry-banner", className: "banner" });
    banner.setAttribute("role", "alert");
    banner.append(el("span", { textContent: this.banner ?? "" }));
    if (this.retry !== null) {
      const button = el("button", { id: "retry-button", type: "button", textContent: "Retry" });
      button.disabled = this.busy;
      button.addEventListener("click", () => {
        const retry = this.retry;
        this.banner = null;
        this.retry = null;
        if (retry !== null) {
          void this.track(retry());
        }
      });
      banner.append(button);
    }
    return banner;
  }

  private renderSignin(): HTMLElement {
    const section = el("section", { id: "signin" });
    section.append(el("h2", { textContent: "Reader sign-in" }));
    const input = el("input", {
      id: "participant-input",
      type: "text",
      placeholder: "participant id",
    });
    input.value = this.signinValue;
    input.addEventListener("input", () => {
      this.signinValue = input.value;
      this.syncControls();
    });
    const button = el("button", {
      id: "signin-button",
      type: "button",
      textContent: "Start session",
    });
    button.disabled = this.busy || this.signinValue.trim() === "";
    button.addEventListener("click", () => void this.track(this.signInFlow()));
    section.append(field("Participant", input), button);
    return section;
  }

  private renderViewer(imageSrc: string, overlayUrl: string | null, interactive: boolean): HTMLElement {
    const wrap = el("div", { className: "viewer-block" });
    const viewer = el("div", { id: "case-viewer", className: "viewer" });
    const viewport = el("div", { className: "viewport" });
    viewport.append(
      el("img", { id: "case-image", src: imageSrc, alt: "fundus photograph under review", draggable: false }),
    );
    let overlay: HTMLImageElement | null = null;
    if (overlayUrl !== null) {
      // Pre-colorized PNG from the service; the client only sets opacity.
      overlay = el("img", {
        id: "heatmap-overlay",
        className: "overlay",
        src: overlayUrl,
        alt: "model attention overlay",
        draggable: false,
      });
      overlay.style.opacity = String(this.overlayOpacity);
      viewport.append(overlay);
    }
    viewer.append(viewport);
    wrap.append(viewer);
    if (!interactive) {
      return wrap;
    }
    this.viewportEl = viewport;
    this.applyViewerTransform();

    let dragging = false;
    let lastX = 0;
    let lastY = 0;
    viewer.addEventListener("mousedown", (event) => {
      dragging = true;
      lastX = event.clientX;
      lastY = event.clientY;
    });
    viewer.addEventListener("mousemove", (event) => {
      if (!dragging) {
        return;
      }
      this.panX += event.clientX - lastX;
      this.panY += event.clientY - lastY;
      lastX = event.clientX;
      lastY = event.clientY;
      this.applyViewerTransform();
    });
    const stopDragging = (): void => {
      dragging = false;
    };
    viewer.addEventListener("mouseup", stopDragging);
    viewer.addEventListener("mouseleave", stopDragging);

    const controls = el("div", { className: "viewer-controls" });
    const zoomIn = el("button", { id: "zoom-in", type: "button", textContent: "Zoom in" });
    zoomIn.addEventListener("click", () => this.setZoom(this.zoom * 1.25));
    const zoomOut = el("button", { id: "zoom-out", type: "button", textContent: "Zoom out" });
    zoomOut.addEventListener("click", () => this.setZoom(this.zoom / 1.25));
    const reset = el("button", { id: "zoom-reset", type: "button", textContent: "Reset view" });
    reset.addEventListener("click", () => {
      this.zoom = 1;
      this.panX = 0;
      this.panY = 0;
      this.applyViewerTransform();
    });
    controls.append(zoomIn, zoomOut, reset);
    if (overlay !== null) {
      const slider = el("input", {
        id: "opacity-slider",
        type: "range",
        min: "0",
        max: "100",
        step: "5",
      });
      slider.value = String(Math.round(this.overlayOpacity * 100));
      const overlayEl = overlay;
      slider.addEventListener("input", () => {
        this.overlayOpacity = Number(slider.value) / 100;
        overlayEl.style.opacity = String(this.overlayOpacity);
      });
      const sliderLabel = el("label", { textContent: "Overlay opacity" });
      sliderLabel.htmlFor = "opacity-slider";
      controls.append(sliderLabel, slider);
    }
    wrap.append(controls);
    return wrap;
  }

  private setZoom(zoom: number): void {
    this.zoom = Math.min(8, Math.max(0.25, zoom));
    this.applyViewerTransform();
  }

  private applyViewerTransform(): void {
    if (this.viewportEl !== null) {
      this.viewportEl.style.transform =
        `translate(${this.panX}px, ${this.panY}px) scale(${this.zoom})`;
    }
  }

  private diagnosisSelect(
    id: string,
    value: string,
    onPick: ((value: string) => void) | null,
  ): HTMLSelectElement {
    const select = el("select", { id });
    select.append(el("option", { value: "", textContent: "— select a diagnosis —" }));
    for (const name of this.diagnosisOptions) {
      select.append(el("option", { value: name, textContent: name }));
    }
    select.value = value;
    if (onPick !== null) {
      select.addEventListener("change", () => onPick(select.value));
    } else {
      select.disabled = true;
    }
    return select;
  }

  private likertSelect(
    id: string,
    value: number,
    onPick: ((value: number) => void) | null,
  ): HTMLSelectElement {
    const select = el("select", { id, className: "likert" });
    select.append(el("option", { value: "", textContent: "–" }));
    for (let v = 1; v <= 5; v++) {
      select.append(el("option", { value: String(v), textContent: String(v) }));
    }
    select.value = isLikert(value) ? String(value) : "";
    if (onPick !== null) {
      select.addEventListener("change", () => onPick(Number(select.value) || 0));
    } else {
      select.disabled = true;
    }
    return select;
  }

  private renderStage1(): HTMLElement {
    const section = el("section", { id: "stage1-form" });
    section.append(this.renderViewer(this.current?.image ?? "", null, true));
    const diagnosis = this.diagnosisSelect("diagnosis-select", this.draft.stage1.diagnosis, (value) => {
      this.draft.stage1.diagnosis = value;
      this.persistDraft();
      this.syncControls();
    });
    const confidence = this.likertSelect("confidence-select", this.draft.stage1.confidence, (value) => {
      this.draft.stage1.confidence = value;
      this.persistDraft();
      this.syncControls();
    });
    const submit = el("button", {
      id: "stage1-submit",
      type: "button",
      textContent: "Commit first diagnosis",
    });
    submit.disabled = this.busy || !this.stage1Ready();
    submit.addEventListener("click", () => void this.track(this.commitStage1Flow()));
    section.append(
      field("Diagnosis", diagnosis),
      field("Confidence (1–5)", confidence),
      submit,
    );
    return section;
  }

  private renderAssistancePanel(assistance: AssistanceView): HTMLElement {
    const panel = el("aside", { id: "assistance-panel" });
    panel.append(el("h2", { textContent: "Model assistance" }));
    const lists = el("div", { className: "assistance-lists" });
    lists.append(
      rankedList("disease-list", "Top-5 diseases", assistance.diseases),
      rankedList("lesion-list", "Top-5 lesions", assistance.lesions),
    );
    panel.append(lists);
    return panel;
  }

  private renderStage2(): HTMLElement {
    const section = el("section", { id: "stage2-form" });
    if (this.assistance === null) {
      const blocked = el("div", { id: "assistance-blocked" });
      blocked.append(
        el("p", {
          textContent:
            "The assistance could not be loaded. The final read stays blocked until it is available.",
        }),
      );
      const retryButton = el("button", {
        id: "assistance-retry",
        type: "button",
        textContent: "Retry loading assistance",
      });
      retryButton.disabled = this.busy;
      retryButton.addEventListener("click", () => void this.track(this.loadAssistance()));
      blocked.append(retryButton);
      section.append(blocked);
      return section;
    }
    const assistance = this.assistance;
    section.append(this.renderViewer(this.current?.image ?? "", assistance.heatmapUrl, true));
    section.append(this.renderAssistancePanel(assistance));
    const diagnosis = this.diagnosisSelect(
      "final-diagnosis-select",
      this.draft.stage2.diagnosis,
      (value) => {
        this.draft.stage2.diagnosis = value;
        this.persistDraft();
        this.syncControls();
      },
    );
    const confidence = this.likertSelect(
      "final-confidence-select",
      this.draft.stage2.confidence,
      (value) => {
        this.draft.stage2.confidence = value;
        this.persistDraft();
        this.syncControls();
      },
    );
    section.append(
      field("Final diagnosis", diagnosis),
      field("Confidence (1–5)", confidence),
    );
    for (const component of RATING_COMPONENTS) {
      const rating = this.likertSelect(
        `rating-${component}`,
        this.draft.stage2.ratings[component] ?? 0,
        (value) => {
          if (value === 0) {
            delete this.draft.stage2.ratings[component];
          } else {
            this.draft.stage2.ratings[component] = value;
          }
          this.persistDraft();
          this.syncControls();
        },
      );
      section.append(field(RATING_LABELS[component], rating));
    }
    const submit = el("button", {
      id: "stage2-submit",
      type: "button",
      textContent: "Commit final diagnosis",
    });
    submit.disabled = this.busy || !this.stage2Ready();
    submit.addEventListener("click", () => void this.track(this.commitStage2Flow()));
    section.append(submit);
    return section;
  }

  private renderReview(): HTMLElement {
    const reading = this.history[this.reviewIndex];
    const section = el("section", { id: "review" });
    const nav = el("div", { id: "review-nav" });
    const prev = el("button", { id: "review-prev", type: "button", textContent: "Previous" });
    prev.disabled = this.reviewIndex === 0;
    prev.addEventListener("click", () => this.openReview(this.reviewIndex - 1));
    const next = el("button", { id: "review-next", type: "button", textContent: "Next" });
    next.disabled = this.reviewIndex >= this.history.length - 1;
    next.addEventListener("click", () => this.openReview(this.reviewIndex + 1));
    const back = el("button", {
      id: "review-return",
      type: "button",
      textContent: this.current !== null ? "Return to current case" : "Back",
    });
    back.addEventListener("click", () => this.closeReview());
    nav.append(prev, next, back);
    section.append(nav);
    section.append(
      el("p", { textContent: `Case ${reading.caseId} is committed and shown read-only.` }),
    );
    section.append(this.renderViewer(reading.image, reading.assistance.heatmapUrl, false));
    section.append(this.renderAssistancePanel(reading.assistance));
    const form = el("div", { id: "review-form" });
    form.append(
      field(
        "First diagnosis",
        this.diagnosisSelect("review-stage1-diagnosis", reading.stage1.diagnosis, null),
      ),
      field(
        "First confidence",
        this.likertSelect("review-stage1-confidence", reading.stage1.confidence, null),
      ),
      field(
        "Final diagnosis",
        this.diagnosisSelect("review-final-diagnosis", reading.stage2.diagnosis, null),
      ),
      field(
        "Final confidence",
        this.likertSelect("review-final-confidence", reading.stage2.confidence, null),
      ),
    );
    for (const component of RATING_COMPONENTS) {
      form.append(
        field(
          RATING_LABELS[component],
          this.likertSelect(`review-rating-${component}`, reading.stage2.ratings[component], null),
        ),
      );
    }
    section.append(form);
    return section;
  }

  private renderQuestionnaire(): HTMLElement {
    const section = el("section", { id: "questionnaire" });
    section.append(el("h2", { textContent: "Exit questionnaire" }));
    section.append(
      el("p", {
        textContent: `All ${this.nCases} cases are complete. Rate the assistance before finishing.`,
      }),
    );
    for (const item of this.questionnaireItems) {
      const select = this.likertSelect(
        `q-${item.key}`,
        this.questionnaireAnswers[item.key] ?? 0,
        (value) => {
          if (value === 0) {
            delete this.questionnaireAnswers[item.key];
          } else {
            this.questionnaireAnswers[item.key] = value;
          }
          this.syncControls();
        },
      );
      section.append(field(item.label, select));
    }
    const submit = el("button", {
      id: "questionnaire-submit",
      type: "button",
      textContent: "Submit questionnaire",
    });
    submit.disabled = this.busy || !this.questionnaireReady();
    submit.addEventListener("click", () => void this.track(this.submitQuestionnaireFlow()));
    section.append(submit);
    return section;
  }

  private renderDone(): HTMLElement {
    const section = el("section", { id: "done" });
    section.append(el("h2", { textContent: "Session complete" }));
    section.append(
      el("p", {
        textContent: `Thank you — all ${this.nCases} cases are read and the questionnaire is submitted.`,
      }),
    );
    return section;
  }
}
