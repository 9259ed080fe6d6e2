import type { Submission } from "./types.js";

/**
 * Rating form state: every (panel label x dimension) score plus the best
 * pick and a free-text comment. Pure reducers; rendering reads from here
 * and never stores scores anywhere else.
 */
export interface FormState {
  labels: string[];
  dimensions: string[];
  scores: Record<string, Record<string, number | null>>;
  best: string | null;
  comment: string;
}

export function emptyForm(labels: string[], dimensions: string[]): FormState {
  const scores: FormState["scores"] = {};
  for (const label of labels) {
    scores[label] = {};
    for (const dim of dimensions) scores[label][dim] = null;
  }
  return { labels: [...labels], dimensions: [...dimensions], scores, best: null, comment: "" };
}

export function setScore(
  state: FormState,
  label: string,
  dimension: string,
  value: number
): FormState {
  if (!(label in state.scores) || !state.dimensions.includes(dimension)) {
    return state;
  }
  const scores = { ...state.scores, [label]: { ...state.scores[label], [dimension]: value } };
  return { ...state, scores };
}

export function setBest(state: FormState, label: string): FormState {
  if (!state.labels.includes(label)) return state;
  return { ...state, best: label };
}

export function setComment(state: FormState, comment: string): FormState {
  return { ...state, comment };
}

/** Submission is allowed only when all labels x dimensions and the pick are set. */
export function formComplete(state: FormState): boolean {
  if (state.best === null) return false;
  for (const label of state.labels) {
    for (const dim of state.dimensions) {
      if (state.scores[label][dim] === null) return false;
    }
  }
  return true;
}

export function toSubmission(state: FormState, caseId: string): Submission {
  if (!formComplete(state)) {
    throw new Error("form is incomplete");
  }
  const scores: Submission["scores"] = {};
  for (const label of state.labels) {
    scores[label] = {};
    for (const dim of state.dimensions) {
      scores[label][dim] = state.scores[label][dim] as number;
    }
  }
  return { case_id: caseId, scores, best: state.best as string, comment: state.comment };
}
