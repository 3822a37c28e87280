/**
 * Local persistence: the session handle plus a draft of the one case
 * currently being read. Committed data lives solely on the service.
 */

import type { Stage1Form, Stage2Form } from "./types";

const SESSION_KEY = "reader-study:session";

export interface StoredSession {
  token: string;
  participantId: string;
  nCases: number;
}

/** What survives a reload for the in-progress case. */
export interface CaseDraft {
  stage1: Stage1Form;
  /** Set once the service acknowledged the stage-1 commit, so a reload
   * resumes into the assisted read instead of re-offering stage 1. */
  stage1Committed: boolean;
  stage2: Stage2Form;
}

export function emptyDraft(): CaseDraft {
  return {
    stage1: { diagnosis: "", confidence: 0 },
    stage1Committed: false,
    stage2: { diagnosis: "", confidence: 0, ratings: {} },
  };
}

export function saveSession(storage: Storage, session: StoredSession): void {
  storage.setItem(SESSION_KEY, JSON.stringify(session));
}

export function loadSession(storage: Storage): StoredSession | null {
  const raw = storage.getItem(SESSION_KEY);
  if (raw === null) {
    return null;
  }
  try {
    const parsed = JSON.parse(raw) as StoredSession;
    if (typeof parsed.token === "string" && parsed.token !== "") {
      return parsed;
    }
  } catch {
    // corrupted entry; treat as absent
  }
  return null;
}

export function clearSession(storage: Storage): void {
  storage.removeItem(SESSION_KEY);
}

function questionnaireKey(token: string): string {
  return `reader-study:questionnaire-done:${token}`;
}

export function markQuestionnaireDone(storage: Storage, token: string): void {
  storage.setItem(questionnaireKey(token), "1");
}

export function isQuestionnaireDone(storage: Storage, token: string): boolean {
  return storage.getItem(questionnaireKey(token)) === "1";
}

/** Draft store scoped to one session token; holds at most one case's draft. */
export class DraftStore {
  private readonly storage: Storage;
  private readonly token: string;

  constructor(storage: Storage, token: string) {
    this.storage = storage;
    this.token = token;
  }

  private key(caseId: string): string {
    return `reader-study:draft:${this.token}:${caseId}`;
  }

  load(caseId: string): CaseDraft | null {
    const raw = this.storage.getItem(this.key(caseId));
    if (raw === null) {
      return null;
    }
    try {
      const parsed = JSON.parse(raw) as CaseDraft;
      if (parsed && typeof parsed.stage1 === "object" && typeof parsed.stage2 === "object") {
        return {
          stage1: { ...emptyDraft().stage1, ...parsed.stage1 },
          stage1Committed: parsed.stage1Committed === true,
          stage2: { ...emptyDraft().stage2, ...parsed.stage2 },
        };
      }
    } catch {
      // corrupted entry; treat as absent
    }
    return null;
  }

  save(caseId: string, draft: CaseDraft): void {
    this.storage.setItem(this.key(caseId), JSON.stringify(draft));
  }

  clear(caseId: string): void {
    this.storage.removeItem(this.key(caseId));
  }
}
