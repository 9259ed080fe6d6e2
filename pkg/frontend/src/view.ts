import { ApiError, ReviewApi } from "./api.js";
import {
  FormState,
  emptyForm,
  formComplete,
  setBest,
  setComment,
  setScore,
  toSubmission,
} from "./form.js";
import type { BlindedCase, StickFigureClip } from "./types.js";
import { isComplete } from "./types.js";

const VIDEO_EXTENSIONS = [".mp4", ".webm", ".ogv", ".mov"];

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/**
 * Single-rater review flow: fetch the current case, collect a complete
 * rating, submit, advance. Panels render the served payload verbatim and
 * in the served order; the client never reshuffles or augments them.
 */
export class ReviewApp {
  readonly root: HTMLElement;
  readonly api: ReviewApi;
  readonly raterId: string;

  form: FormState;
  currentCase: BlindedCase | null = null;
  submitting = false;
  private banner: string | null = null;
  private previewTimer: ReturnType<typeof setInterval> | null = null;

  constructor(root: HTMLElement, api: ReviewApi, raterId: string) {
    this.root = root;
    this.api = api;
    this.raterId = raterId;
    this.form = emptyForm([], []);
  }

  async start(): Promise<void> {
    this.stopPreview();
    try {
      const payload = await this.api.nextCase(this.raterId);
      if (isComplete(payload)) {
        this.renderComplete(payload.progress.rated, payload.progress.assigned);
        return;
      }
      this.currentCase = payload;
      this.form = emptyForm(
        payload.panels.map((p) => p.label),
        payload.dimensions
      );
      this.render();
    } catch (err) {
      this.renderError(err instanceof Error ? err.message : String(err));
    }
  }

  async submit(): Promise<void> {
    if (!this.currentCase || this.submitting || !formComplete(this.form)) return;
    this.submitting = true;
    this.render();
    try {
      await this.api.submitRating(this.raterId, toSubmission(this.form, this.currentCase.case_id));
      this.banner = null;
      this.submitting = false;
      await this.start();
    } catch (err) {
      this.submitting = false;
      if (err instanceof ApiError && err.code === "DuplicateRating") {
        // someone already recorded this case: surface it and move on
        this.banner = "This case was already rated; loading the next one.";
        await this.start();
        this.renderBanner();
      } else {
        this.renderError(err instanceof Error ? err.message : String(err));
      }
    }
  }

  // -- rendering -------------------------------------------------------

  private render(): void {
    const c = this.currentCase;
    if (!c) return;
    this.root.textContent = "";

    const header = el("header", "app-header");
    header.appendChild(el("h1", "", "Blinded Gait Case Review"));
    const progress = el("div", "progress");
    progress.dataset.role = "progress";
    progress.textContent = `Rated ${c.progress.rated} of ${c.progress.assigned} assigned cases`;
    header.appendChild(progress);
    this.root.appendChild(header);

    this.renderBanner();
    this.root.appendChild(this.buildPreview(c));

    const panels = el("section", "panels");
    for (const panel of c.panels) {
      panels.appendChild(this.buildPanel(panel.label, panel.rationale));
    }
    this.root.appendChild(panels);

    this.root.appendChild(this.buildBestPicker(c));
    this.root.appendChild(this.buildCommentBox());
    this.root.appendChild(this.buildSubmitRow(c));
  }

  private renderBanner(): void {
    const existing = this.root.querySelector('[data-role="banner"]');
    if (existing) existing.remove();
    if (!this.banner) return;
    const banner = el("div", "banner", this.banner);
    banner.dataset.role = "banner";
    this.root.insertBefore(banner, this.root.children[1] ?? null);
  }

  private buildPreview(c: BlindedCase): HTMLElement {
    const wrap = el("section", "preview");
    wrap.dataset.role = "preview";
    wrap.appendChild(el("h2", "", `Case ${c.case_id}`));
    if (!c.preview) {
      wrap.appendChild(el("p", "preview-note", "No preview available for this case."));
      return wrap;
    }
    const lower = c.preview.toLowerCase();
    if (VIDEO_EXTENSIONS.some((ext) => lower.endsWith(ext))) {
      const video = document.createElement("video");
      video.src = c.preview;
      video.controls = true;
      video.dataset.role = "video-preview";
      wrap.appendChild(video);
    } else {
      const canvas = document.createElement("canvas");
      canvas.width = 360;
      canvas.height = 300;
      canvas.dataset.role = "skeleton-preview";
      wrap.appendChild(canvas);
      void this.animateSkeleton(canvas, c.case_id);
    }
    return wrap;
  }

  private async animateSkeleton(canvas: HTMLCanvasElement, caseId: string): Promise<void> {
    let clip: StickFigureClip;
    try {
      clip = await this.api.preview(caseId);
    } catch {
      canvas.replaceWith(el("p", "preview-note", "Preview reference could not be loaded."));
      return;
    }
    const ctx = canvas.getContext ? canvas.getContext("2d") : null;
    if (!ctx || clip.frames.length === 0) return;
    let i = 0;
    const draw = () => {
      const frame = clip.frames[i % clip.frames.length];
      i += 1;
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      const ox = canvas.width / 2;
      const oy = 60;
      const s = 180; // meters -> pixels; y grows downward in both spaces
      ctx.lineWidth = 3;
      ctx.beginPath(); // trunk
      ctx.moveTo(ox, oy - 50);
      ctx.lineTo(ox, oy);
      ctx.stroke();
      for (const side of ["left", "right"] as const) {
        const leg = frame[side];
        ctx.beginPath();
        ctx.moveTo(ox, oy);
        ctx.lineTo(ox + leg.knee[0] * s, oy + leg.knee[1] * s);
        ctx.lineTo(ox + leg.ankle[0] * s, oy + leg.ankle[1] * s);
        ctx.lineTo(ox + leg.toe[0] * s, oy + leg.toe[1] * s);
        ctx.stroke();
      }
    };
    draw();
    this.previewTimer = setInterval(draw, 1000 / Math.max(1, clip.fps));
  }

  private stopPreview(): void {
    if (this.previewTimer !== null) {
      clearInterval(this.previewTimer);
      this.previewTimer = null;
    }
  }

  private buildPanel(label: string, rationale: string): HTMLElement {
    const c = this.currentCase as BlindedCase;
    const panel = el("article", "panel");
    panel.dataset.role = "panel";
    panel.dataset.label = label;
    panel.appendChild(el("h3", "", `Diagnosis ${label}`));
    const text = el("p", "rationale", rationale);
    text.dataset.role = "rationale";
    panel.appendChild(text);

    for (const dim of c.dimensions) {
      const row = el("div", "likert-row");
      row.appendChild(el("span", "likert-name", dim));
      const group = el("div", "likert-buttons");
      for (let v = c.scale.min; v <= c.scale.max; v++) {
        const lab = el("label");
        const input = document.createElement("input");
        input.type = "radio";
        input.name = `score-${label}-${dim}`;
        input.value = String(v);
        input.dataset.role = "score";
        input.dataset.label = label;
        input.dataset.dimension = dim;
        input.checked = this.form.scores[label][dim] === v;
        input.addEventListener("change", () => {
          this.form = setScore(this.form, label, dim, v);
          this.syncSubmitButton();
        });
        lab.appendChild(input);
        lab.appendChild(document.createTextNode(String(v)));
        group.appendChild(lab);
      }
      row.appendChild(group);
      panel.appendChild(row);
    }
    return panel;
  }

  private buildBestPicker(c: BlindedCase): HTMLElement {
    const wrap = el("section", "best-pick");
    wrap.appendChild(el("h3", "", "Best model for this case"));
    for (const panel of c.panels) {
      const lab = el("label");
      const input = document.createElement("input");
      input.type = "radio";
      input.name = "best";
      input.value = panel.label;
      input.dataset.role = "best";
      input.dataset.label = panel.label;
      input.checked = this.form.best === panel.label;
      input.addEventListener("change", () => {
        this.form = setBest(this.form, panel.label);
        this.syncSubmitButton();
      });
      lab.appendChild(input);
      lab.appendChild(document.createTextNode(`Diagnosis ${panel.label}`));
      wrap.appendChild(lab);
    }
    return wrap;
  }

  private buildCommentBox(): HTMLElement {
    const wrap = el("section", "comment");
    const area = document.createElement("textarea");
    area.dataset.role = "comment";
    area.placeholder = "Optional comment justifying the selection";
    area.value = this.form.comment;
    area.addEventListener("input", () => {
      this.form = setComment(this.form, area.value);
    });
    wrap.appendChild(area);
    return wrap;
  }

  private buildSubmitRow(_c: BlindedCase): HTMLElement {
    const row = el("div", "submit-row");
    const button = document.createElement("button");
    button.dataset.role = "submit";
    button.textContent = this.submitting ? "Submitting…" : "Submit rating";
    button.disabled = this.submitting || !formComplete(this.form);
    button.addEventListener("click", () => void this.submit());
    row.appendChild(button);
    return row;
  }

  private syncSubmitButton(): void {
    const button = this.root.querySelector<HTMLButtonElement>('[data-role="submit"]');
    if (button) button.disabled = this.submitting || !formComplete(this.form);
  }

  renderComplete(rated: number, assigned: number): void {
    this.stopPreview();
    this.currentCase = null;
    this.root.textContent = "";
    const box = el("section", "complete");
    box.dataset.role = "complete";
    box.appendChild(el("h1", "", "Study complete"));
    box.appendChild(
      el("p", "", `You have rated all ${rated} of your ${assigned} assigned cases. Thank you.`)
    );
    this.root.appendChild(box);
  }

  renderError(message: string): void {
    this.stopPreview();
    this.root.textContent = "";
    const box = el("section", "error");
    box.dataset.role = "error";
    box.appendChild(el("h1", "", "Connection problem"));
    box.appendChild(el("p", "", message));
    const retry = document.createElement("button");
    retry.dataset.role = "retry";
    retry.textContent = "Retry";
    retry.addEventListener("click", () => void this.start());
    box.appendChild(retry);
    this.root.appendChild(box);
  }
}
