"""Scenario config: a strict JSON document mapped onto simulator types."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .closedloop import DetectorConfig, MitigatorConfig
from .errors import FailSlowError, InvalidInputError
from .mitigator import STRATEGY_IDS, OverheadConfig
from .model import ParallelTopology, TrafficModel, link_id
from .sim import ClusterScenario, InjectionEvent


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LinkSpec(_Strict):
    a: int = Field(ge=0)
    b: int = Field(ge=0)
    bandwidth: float = Field(gt=0)


class TopologySection(_Strict):
    tp: int = Field(1, ge=1)
    dp: int = Field(1, ge=1)
    pp: int = Field(1, ge=1)
    gpus_per_node: Optional[int] = Field(None, ge=1)
    nodes: Optional[int] = Field(None, ge=1)
    link_bandwidth: float = Field(25e9, gt=0)
    intra_node_bandwidth: float = Field(300e9, gt=0)
    links: List[LinkSpec] = []


class ModelSection(_Strict):
    layers: int = Field(ge=1)
    hidden: int = Field(ge=1)
    heads: int = Field(ge=0)
    head_dim: int = Field(ge=0)
    vocab: int = Field(ge=0)
    context: int = Field(ge=0)
    micro_batch: int = Field(1, ge=1)
    num_micro_batches: int = Field(1, ge=1)
    grad_bytes_factor: float = Field(2.0, gt=0)
    element_bytes: int = Field(2, ge=1)


class ComputeSection(_Strict):
    base_compute: float = Field(gt=0)
    gpu_speed: Dict[int, float] = {}
    noise: float = Field(0.005, ge=0, lt=0.5)


class InjectionSpec(_Strict):
    kind: Literal["gpu_slowdown", "link_congestion"]
    target: int | Tuple[int, int]
    factor: float = Field(gt=0, lt=1)
    start: int = Field(ge=0)
    end: int = Field(ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.end <= self.start:
            raise ValueError("end must be greater than start")
        if self.kind == "gpu_slowdown" and not isinstance(self.target, int):
            raise ValueError("gpu_slowdown target must be a GPU id")
        if self.kind == "link_congestion" and isinstance(self.target, int):
            raise ValueError("link_congestion target must be a [node, node] pair")
        return self


class DetectorSection(_Strict):
    period_threshold: float = Field(0.95, gt=0, le=1)
    threshold: float = Field(0.9, gt=0, le=1)
    hazard_lambda: float = Field(1000.0, gt=1)
    jitter: float = Field(0.10, gt=0)
    window: int = Field(20, ge=1)


class MitigatorSection(_Strict):
    ladder: List[Literal["S1", "S2", "S3", "S4"]] = list(STRATEGY_IDS)
    topology_seconds: float = Field(60.0, ge=0)
    storage_bandwidth: float = Field(2e11 / 6000.0, gt=0)
    restart_seconds: float = Field(0.0, ge=0)
    solver_seconds: Optional[float] = Field(None, ge=0)
    gemm_work: float = Field(1.0, gt=0)
    p2p_bytes: float = Field(64e6, gt=0)


class OutputSection(_Strict):
    dir: str = "out"
    trace: bool = False


class ScenarioConfig(_Strict):
    seed: int = 0
    horizon: int = Field(ge=1)
    topology: TopologySection
    model: ModelSection
    compute: ComputeSection
    injections: List[InjectionSpec] = []
    detector: DetectorSection = DetectorSection()
    mitigator: MitigatorSection = MitigatorSection()
    output: OutputSection = OutputSection()

    def build_topology(self) -> ParallelTopology:
        t = self.topology
        topo = ParallelTopology.build(
            t.tp, t.dp, t.pp, t.gpus_per_node, t.link_bandwidth, t.intra_node_bandwidth
        )
        if t.nodes is not None and t.nodes != topo.num_nodes:
            raise InvalidInputError(
                f"topology.nodes: {t.nodes} nodes given but the layout needs {topo.num_nodes}"
            )
        if t.links:
            links = dict(topo.links)
            for i, lk in enumerate(t.links):
                key = link_id(lk.a, lk.b)
                if key not in links:
                    raise InvalidInputError(f"topology.links.{i}: no link between nodes {lk.a} and {lk.b}")
                links[key] = lk.bandwidth
            topo = ParallelTopology(
                topo.tp, topo.dp, topo.pp, topo.gpus_per_node, topo.placement, links,
                topo.intra_node_bandwidth,
            )
        return topo

    def build_scenario(self, seed: Optional[int] = None) -> ClusterScenario:
        injections = []
        for i, inj in enumerate(self.injections):
            try:
                injections.append(InjectionEvent(inj.kind, inj.target, inj.factor, inj.start, inj.end))
            except FailSlowError as exc:
                raise InvalidInputError(f"injections.{i}: {exc}") from None
        try:
            return ClusterScenario(
                self.build_topology(),
                TrafficModel(**self.model.model_dump()),
                self.compute.base_compute,
                tuple(injections),
                self.horizon,
                self.seed if seed is None else seed,
                dict(self.compute.gpu_speed),
                self.compute.noise,
            )
        except InvalidInputError as exc:
            msg = str(exc)
            raise InvalidInputError(msg if "." in msg.split(":")[0] else f"scenario: {msg}") from None

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(**self.detector.model_dump())

    def mitigator_config(self, enabled: bool = True) -> MitigatorConfig:
        m = self.mitigator
        return MitigatorConfig(
            enabled=enabled,
            ladder=tuple(m.ladder),
            overheads=OverheadConfig(
                dp_groups=self.topology.dp,
                topology_seconds=m.topology_seconds,
                storage_bandwidth=m.storage_bandwidth,
                restart_seconds=m.restart_seconds,
                solver_seconds=m.solver_seconds,
            ),
            gemm_work=m.gemm_work,
            p2p_bytes=m.p2p_bytes,
        )


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "(root)"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def parse_config(text: str) -> ScenarioConfig:
    """Parse and validate; errors name the line or field at fault."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as exc:
        raise InvalidInputError(_format_errors(exc)) from None


def load_config(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)
