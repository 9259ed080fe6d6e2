/** Payload shapes of the review-service HTTP API (documented server-side). */

export interface Panel {
  label: string;
  rationale: string;
}

export interface Progress {
  rated: number;
  assigned: number;
}

export interface BlindedCase {
  case_id: string;
  preview: string;
  panels: Panel[];
  dimensions: string[];
  scale: { min: number; max: number };
  progress: Progress;
}

export interface CompleteSignal {
  complete: true;
  progress: Progress;
}

export type NextResponse = BlindedCase | CompleteSignal;

export interface Ack {
  ok: boolean;
  progress: Progress;
}

export interface Submission {
  case_id: string;
  scores: Record<string, Record<string, number>>;
  best: string;
  comment: string;
}

export interface StickFigureFrame {
  left: { knee: number[]; ankle: number[]; toe: number[] };
  right: { knee: number[]; ankle: number[]; toe: number[] };
}

export interface StickFigureClip {
  fps: number;
  frames: StickFigureFrame[];
}

export function isComplete(payload: NextResponse): payload is CompleteSignal {
  return (payload as CompleteSignal).complete === true;
}
