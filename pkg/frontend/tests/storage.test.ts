import { beforeEach, describe, expect, it } from "vitest";

import {
  clearSession,
  DraftStore,
  emptyDraft,
  isQuestionnaireDone,
  loadSession,
  markQuestionnaireDone,
  saveSession,
} from "../src/storage";

beforeEach(() => {
  window.localStorage.clear();
});

describe("session persistence", () => {
  it("round-trips the session handle", () => {
    saveSession(window.localStorage, { token: "tok-9", participantId: "r1", nCases: 4 });
    expect(loadSession(window.localStorage)).toEqual({
      token: "tok-9",
      participantId: "r1",
      nCases: 4,
    });
    clearSession(window.localStorage);
    expect(loadSession(window.localStorage)).toBeNull();
  });

  it("treats corrupted entries as absent", () => {
    window.localStorage.setItem("reader-study:session", "{nope");
    expect(loadSession(window.localStorage)).toBeNull();
  });

  it("tracks questionnaire completion per token", () => {
    expect(isQuestionnaireDone(window.localStorage, "tok-1")).toBe(false);
    markQuestionnaireDone(window.localStorage, "tok-1");
    expect(isQuestionnaireDone(window.localStorage, "tok-1")).toBe(true);
    expect(isQuestionnaireDone(window.localStorage, "tok-2")).toBe(false);
  });
});

describe("DraftStore", () => {
  it("round-trips a case draft", () => {
    const store = new DraftStore(window.localStorage, "tok-1");
    const draft = emptyDraft();
    draft.stage1 = { diagnosis: "macular hole", confidence: 4 };
    draft.stage1Committed = true;
    draft.stage2.ratings.heatmap = 5;
    store.save("case-1", draft);
    expect(store.load("case-1")).toEqual(draft);
  });

  it("returns null for missing or corrupted drafts", () => {
    const store = new DraftStore(window.localStorage, "tok-1");
    expect(store.load("case-1")).toBeNull();
    window.localStorage.setItem("reader-study:draft:tok-1:case-1", "not json");
    expect(store.load("case-1")).toBeNull();
  });

  it("scopes drafts by session token", () => {
    const a = new DraftStore(window.localStorage, "tok-a");
    const b = new DraftStore(window.localStorage, "tok-b");
    const draft = emptyDraft();
    draft.stage1.diagnosis = "glaucoma suspect";
    a.save("case-1", draft);
    expect(b.load("case-1")).toBeNull();
  });

  it("clears a committed case's draft", () => {
    const store = new DraftStore(window.localStorage, "tok-1");
    store.save("case-1", emptyDraft());
    store.clear("case-1");
    expect(store.load("case-1")).toBeNull();
    expect(window.localStorage.getItem("reader-study:draft:tok-1:case-1")).toBeNull();
  });
});
