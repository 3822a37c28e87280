"""HTTP layer for the reading study.

Thin FastAPI wrapper over ``Study``: every route delegates to the protocol
coordinator, so the HTTP layer adds only serialization, status codes, and
the admin token check. Ground truth never appears in any participant-facing
response, and assistance (JSON and heatmap alike) stays locked until the
first diagnosis for that case is committed.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Header, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel

from .analysis import IncompleteStudyError, aggregate_results
from .protocol import ProtocolError, Study, UnknownSessionError
from .records import ValidationError


class SessionRequest(BaseModel):
    participant_id: str


class Stage1Body(BaseModel):
    diagnosis: str
    confidence: int


class Stage2Body(BaseModel):
    diagnosis: str
    confidence: int
    ratings: dict[str, int]


class QuestionnaireBody(BaseModel):
    ratings: dict[str, int]


def create_app(study: Study, *, admin_token: str | None = None) -> FastAPI:
    app = FastAPI(title="reading-study")

    @app.exception_handler(UnknownSessionError)
    async def _unknown_session(request, exc):
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.exception_handler(ProtocolError)
    async def _protocol(request, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.exception_handler(ValidationError)
    async def _validation(request, exc):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.exception_handler(IncompleteStudyError)
    async def _incomplete(request, exc):
        return JSONResponse(status_code=409, content={"detail": str(exc)})

    @app.post("/sessions")
    def create_session(body: SessionRequest):
        session = study.start_session(body.participant_id)
        return {"token": session.token, "n_cases": len(session.order)}

    @app.get("/sessions/{token}/next")
    def next_case(token: str):
        view = study.current_case_view(token)
        if view is None:
            return {"complete": True}
        return {"complete": False, "case": view}

    @app.post("/sessions/{token}/cases/{case_id}/stage1")
    def stage1(token: str, case_id: str, body: Stage1Body):
        study.commit_stage1(token, case_id, body.diagnosis, body.confidence)
        return {"committed": "stage1"}

    @app.get("/sessions/{token}/cases/{case_id}/assistance")
    def assistance(token: str, case_id: str):
        payload = study.view_assistance(token, case_id)
        payload["heatmap"] = f"/sessions/{token}/cases/{case_id}/heatmap"
        return payload

    @app.get("/sessions/{token}/cases/{case_id}/heatmap")
    def heatmap(token: str, case_id: str):
        session = study.session(token)
        if case_id not in session.readings:
            raise ProtocolError(
                f"assistance for case {case_id} is locked until the first diagnosis is committed"
            )
        path = Path(study.cases[case_id].assistance.heatmap)
        if not path.is_file():
            raise HTTPException(status_code=404, detail="heatmap file missing")
        return FileResponse(path, media_type="image/png")

    @app.post("/sessions/{token}/cases/{case_id}/stage2")
    def stage2(token: str, case_id: str, body: Stage2Body):
        study.commit_stage2(token, case_id, body.diagnosis, body.confidence, body.ratings)
        return {"committed": "stage2", "complete": study.session(token).complete}

    @app.post("/sessions/{token}/questionnaire")
    def questionnaire(token: str, body: QuestionnaireBody):
        study.submit_questionnaire(token, body.ratings)
        return {"committed": "questionnaire"}

    @app.get("/admin/report")
    def report(x_admin_token: str | None = Header(default=None)):
        if admin_token is not None and x_admin_token != admin_token:
            raise HTTPException(status_code=403, detail="admin token required")
        return aggregate_results(study)

    return app
