/** Shared shapes for the reader-study frontend. */

/** One ranked model suggestion (a disease or a lesion) with its score. */
export interface RankedEntry {
  name: string;
  score: number;
}

/** The assistance bundle the service unlocks after the stage-1 commit. */
export interface AssistanceView {
  diseases: RankedEntry[];
  lesions: RankedEntry[];
  heatmapUrl: string;
}

/** Pointer to the case the service expects the reader to work on next. */
export interface CasePointer {
  caseId: string;
  image: string;
  /** Zero-based position in the session order; doubles as the completed count. */
  index: number;
  total: number;
}

export interface SessionInfo {
  token: string;
  nCases: number;
}

/** The three assistance components every stage-2 submission must rate. */
export const RATING_COMPONENTS = ["top5_diseases", "top5_lesions", "heatmap"] as const;

export type RatingComponent = (typeof RATING_COMPONENTS)[number];

export const RATING_LABELS: Record<RatingComponent, string> = {
  top5_diseases: "Usefulness of the top-5 disease list",
  top5_lesions: "Usefulness of the top-5 lesion list",
  heatmap: "Usefulness of the heatmap overlay",
};

/** Mutable stage-1 fields; confidence 0 means "not chosen yet". */
export interface Stage1Form {
  diagnosis: string;
  confidence: number;
}

/** Mutable stage-2 fields; ratings fill in one component at a time. */
export interface Stage2Form {
  diagnosis: string;
  confidence: number;
  ratings: Partial<Record<RatingComponent, number>>;
}

/** Everything the client keeps in memory about a case it finished this session. */
export interface CompletedReading {
  caseId: string;
  image: string;
  stage1: { diagnosis: string; confidence: number };
  stage2: {
    diagnosis: string;
    confidence: number;
    ratings: Record<RatingComponent, number>;
  };
  assistance: AssistanceView;
}

export function isLikert(value: number): boolean {
  return Number.isInteger(value) && value >= 1 && value <= 5;
}
