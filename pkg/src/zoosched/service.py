"""Scheduling service: a long-running wrapper around the zoo and the online
predictor for clients that submit fine-tuning requests over HTTP.

POST /schedule turns task meta-data plus a time budget into a concrete
(model, regime) decision; POST /feedback reports the fine-tuning outcome and
updates the predictor in place, so the service keeps learning across
requests.
"""

from __future__ import annotations

import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .predictor import AdaptiveMLP, Sample, init, observe, predict
from .scheduler import (
    DEFAULT_GRID,
    Decision,
    NoFeasibleCandidates,
    Regime,
    Request,
    TaskMeta,
    feature_dim,
    feature_vector,
    generate,
)
from .zoo import ModelZoo, zoo_from_json


class TaskMetaModel(BaseModel):
    num_classes: int = Field(gt=0)
    avg_images_per_class: float = Field(gt=0)
    std_images_per_class: float = Field(ge=0)
    domain_similarity: float
    train_set_size: int = Field(gt=0)
    batch_size: int = Field(gt=0)

    def to_meta(self) -> TaskMeta:
        return TaskMeta(**self.model_dump())


class ScheduleRequest(BaseModel):
    meta: TaskMetaModel
    time_limit_seconds: float = Field(gt=0)


class RegimeModel(BaseModel):
    learning_rate: float
    num_iterations: int
    frozen_stages: int
    decay_milestones: tuple[float, float]


class DecisionModel(BaseModel):
    entry_name: str
    encoding: str
    regime: RegimeModel
    predicted_accuracy: float
    candidates_examined: int

    @classmethod
    def from_decision(cls, d: Decision) -> "DecisionModel":
        return cls(
            entry_name=d.entry_name,
            encoding=d.encoding,
            regime=RegimeModel(
                learning_rate=d.regime.learning_rate,
                num_iterations=d.regime.num_iterations,
                frozen_stages=d.regime.frozen_stages,
                decay_milestones=d.regime.decay_milestones,
            ),
            predicted_accuracy=d.predicted_accuracy,
            candidates_examined=d.candidates_examined,
        )


class Feedback(BaseModel):
    meta: TaskMetaModel
    entry_name: str
    learning_rate: float
    num_iterations: int = Field(ge=1)
    frozen_stages: int
    observed_accuracy: float = Field(ge=0.0, le=1.0)


class FeedbackResponse(BaseModel):
    updated: bool
    prediction_before: float
    absolute_error: float
    observations: int


class ZooEntryModel(BaseModel):
    name: str
    encoding: str
    reference_accuracy: float


class Health(BaseModel):
    status: str
    version: str
    zoo_size: int
    observations: int


class ServiceState:
    def __init__(self, zoo: ModelZoo, predictor: AdaptiveMLP):
        self.zoo = zoo
        self.predictor = predictor
        self.observations = 0
        self.lock = threading.Lock()


def create_app(
    zoo_path: str | Path | None = None,
    zoo: ModelZoo | None = None,
    seed: int = 0,
    layers: int = 10,
    width: int = 64,
    smoothing: float = 0.01,
) -> FastAPI:
    if zoo is None:
        if zoo_path is None:
            raise ValueError("create_app needs a zoo or a zoo_path")
        zoo = zoo_from_json(Path(zoo_path).read_text())
    predictor = init(layers, width, feature_dim(zoo), seed=seed, smoothing=smoothing)
    state = ServiceState(zoo, predictor)
    app = FastAPI(title="zoosched scheduling service", version=__version__)
    app.state.service = state

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(
            status="ok", version=__version__,
            zoo_size=len(state.zoo), observations=state.observations,
        )

    @app.get("/zoo", response_model=list[ZooEntryModel])
    def zoo_entries() -> list[ZooEntryModel]:
        return [
            ZooEntryModel(
                name=e.name, encoding=e.encoding, reference_accuracy=e.reference_accuracy
            )
            for e in state.zoo.entries
        ]

    @app.get("/predictor/weights")
    def predictor_weights() -> dict:
        return {
            "layers": state.predictor.layers,
            "alpha": [float(a) for a in state.predictor.alpha],
            "observations": state.observations,
        }

    @app.post("/schedule", response_model=DecisionModel)
    def schedule(request: ScheduleRequest) -> DecisionModel:
        req = Request(meta=request.meta.to_meta(), time_limit_seconds=request.time_limit_seconds)
        with state.lock:
            try:
                decision = generate(req, state.predictor, state.zoo, DEFAULT_GRID)
            except NoFeasibleCandidates as exc:
                raise HTTPException(status_code=409, detail=str(exc))
        return DecisionModel.from_decision(decision)

    @app.post("/feedback", response_model=FeedbackResponse)
    def feedback(report: Feedback) -> FeedbackResponse:
        try:
            entry = state.zoo.by_name(report.entry_name)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown entry {report.entry_name!r}")
        try:
            regime = Regime(
                learning_rate=report.learning_rate,
                num_iterations=report.num_iterations,
                frozen_stages=report.frozen_stages,
            )
            meta = report.meta.to_meta()
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        x = feature_vector(state.zoo, entry, regime, meta)
        with state.lock:
            before, _ = predict(state.predictor, x)
            observe(state.predictor, Sample(features=x, acc_gt=report.observed_accuracy))
            state.observations += 1
            count = state.observations
        clipped = min(max(before, 0.0), 1.0)
        return FeedbackResponse(
            updated=True,
            prediction_before=float(before),
            absolute_error=abs(clipped - report.observed_accuracy),
            observations=count,
        )

    return app
