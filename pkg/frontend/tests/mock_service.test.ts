/** Sanity checks that the mock enforces the same protocol as the service. */

import { describe, expect, it } from "vitest";

import { demoCases, MockService } from "./mock_service";

const GOOD_RATINGS = { top5_diseases: 3, top5_lesions: 4, heatmap: 5 };

async function post(svc: MockService, path: string, body: unknown) {
  return svc.fetch(path, { method: "POST", body: JSON.stringify(body) });
}

async function startSession(svc: MockService): Promise<string> {
  const created = await post(svc, "/sessions", { participant_id: "r1" });
  const { token } = (await created.json()) as { token: string };
  return token;
}

describe("MockService protocol", () => {
  it("rejects assistance before the stage-1 commit with 409", async () => {
    const svc = new MockService(demoCases(1));
    const token = await startSession(svc);
    const reply = await svc.fetch(`/sessions/${token}/cases/case-1/assistance`);
    expect(reply.status).toBe(409);
  });

  it("rejects a duplicate stage-1 commit with 409", async () => {
    const svc = new MockService(demoCases(1));
    const token = await startSession(svc);
    const body = { diagnosis: "macular hole", confidence: 3 };
    expect((await post(svc, `/sessions/${token}/cases/case-1/stage1`, body)).status).toBe(200);
    expect((await post(svc, `/sessions/${token}/cases/case-1/stage1`, body)).status).toBe(409);
  });

  it("rejects stage 2 before the assistance was viewed with 409", async () => {
    const svc = new MockService(demoCases(1));
    const token = await startSession(svc);
    await post(svc, `/sessions/${token}/cases/case-1/stage1`, {
      diagnosis: "macular hole",
      confidence: 3,
    });
    const reply = await post(svc, `/sessions/${token}/cases/case-1/stage2`, {
      diagnosis: "macular hole",
      confidence: 4,
      ratings: GOOD_RATINGS,
    });
    expect(reply.status).toBe(409);
  });

  it("rejects stage 2 with an incomplete ratings map with 422", async () => {
    const svc = new MockService(demoCases(1));
    const token = await startSession(svc);
    await post(svc, `/sessions/${token}/cases/case-1/stage1`, {
      diagnosis: "macular hole",
      confidence: 3,
    });
    await svc.fetch(`/sessions/${token}/cases/case-1/assistance`);
    const reply = await post(svc, `/sessions/${token}/cases/case-1/stage2`, {
      diagnosis: "macular hole",
      confidence: 4,
      ratings: { top5_diseases: 3, heatmap: 5 },
    });
    expect(reply.status).toBe(422);
  });

  it("rejects an unknown session token with 404", async () => {
    const svc = new MockService(demoCases(1));
    const reply = await svc.fetch("/sessions/bogus/next");
    expect(reply.status).toBe(404);
  });

  it("rejects a second session for the same participant with 409", async () => {
    const svc = new MockService(demoCases(1));
    await startSession(svc);
    const again = await post(svc, "/sessions", { participant_id: "r1" });
    expect(again.status).toBe(409);
  });

  it("locks the questionnaire until every case is complete", async () => {
    const svc = new MockService(demoCases(2));
    const token = await startSession(svc);
    const early = await post(svc, `/sessions/${token}/questionnaire`, {
      ratings: { overall: 4 },
    });
    expect(early.status).toBe(409);
  });

  it("walks a full session and flips complete on the last stage-2 commit", async () => {
    const svc = new MockService(demoCases(2));
    const token = await startSession(svc);
    for (const [caseId, expected] of [
      ["case-1", false],
      ["case-2", true],
    ] as const) {
      await post(svc, `/sessions/${token}/cases/${caseId}/stage1`, {
        diagnosis: "normal fundus",
        confidence: 3,
      });
      await svc.fetch(`/sessions/${token}/cases/${caseId}/assistance`);
      const reply = await post(svc, `/sessions/${token}/cases/${caseId}/stage2`, {
        diagnosis: "normal fundus",
        confidence: 4,
        ratings: GOOD_RATINGS,
      });
      expect(reply.status).toBe(200);
      expect(((await reply.json()) as { complete: boolean }).complete).toBe(expected);
    }
    const done = await post(svc, `/sessions/${token}/questionnaire`, {
      ratings: { overall: 4 },
    });
    expect(done.status).toBe(200);
  });
});
