"""Run configuration: one JSON document describes a reproducible session.

The document pins every seed and knob a trajectory depends on (tree, target,
policy, consensus, perturbation, respiration, advisor, render sizes), so a
committed config plus the code version replays to identical log digests.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .airway import AirwayTree, RespirationConfig, TreeConfig, generate_tree
from .critic import SurrogateModel
from .navigator import NavConfig, NavigationSession
from .preop import DEFAULT_SPACING_MM, PlannedPath, build_bundle
from .reactive import OracleContext, ServoParams, make_policy
from .render import (CameraIntrinsics, NATIVE_INTRINSICS, PerturbationConfig,
                     Renderer)
from .sim import KinematicsConfig
from .strategic import (AdvisorClient, HttpAdvisorClient, OracleAdvisorClient,
                        ScriptedAdvisorClient)

# Observation/bundle render resolution for live policy traffic. The policy
# consumes 85x64 inputs, so rendering straight at that size keeps the
# per-step cost down; native 392x392 stays in use for exports, fouling
# calibration, and endpoint metrics. Raise this (e.g. 170x128) when an
# external advisor needs more legible prompt images.
OBS_WIDTH_DEFAULT, OBS_HEIGHT_DEFAULT = 85, 64


@dataclass(frozen=True)
class AdvisorSpec:
    kind: str = "oracle"  # oracle | scripted | http | none
    url: str = ""
    plans: tuple = ()

    def build(self, tree: AirwayTree, renderer: Renderer,
              kin: KinematicsConfig) -> AdvisorClient | None:
        if self.kind == "none":
            return None
        if self.kind == "oracle":
            return OracleAdvisorClient(tree, renderer, kin)
        if self.kind == "scripted":
            return ScriptedAdvisorClient([list(p) for p in self.plans])
        if self.kind == "http":
            return HttpAdvisorClient(self.url)
        raise ValueError(f"unknown advisor kind {self.kind!r}")


@dataclass(frozen=True)
class RunConfig:
    tree_seed: int = 1
    tree: TreeConfig = field(default_factory=TreeConfig)
    target_branch: int = -1           # -1: pick by generation below
    target_generation: int = 4
    target_rank: int = 0              # which branch of that generation
    target_arc_frac: float = 0.7
    spacing_mm: float = DEFAULT_SPACING_MM
    policy: str = "servo"
    mode: str = "autonomous"          # autonomous | teleop
    nav: NavConfig = field(default_factory=NavConfig)
    kin: KinematicsConfig = field(default_factory=KinematicsConfig)
    servo: ServoParams = field(default_factory=ServoParams)
    perturb: PerturbationConfig = field(default_factory=PerturbationConfig)
    resp: RespirationConfig = field(default_factory=RespirationConfig)
    advisor: AdvisorSpec = field(default_factory=AdvisorSpec)
    obs_width: int = OBS_WIDTH_DEFAULT
    obs_height: int = OBS_HEIGHT_DEFAULT
    surrogate_horizon: int = 3
    surrogate_pose_jitter_mm: float = 0.0
    surrogate_bend_jitter_deg: float = 0.0
    surrogate_seed: int = 0

    def to_dict(self) -> dict:
        def enc(value):
            if dataclasses.is_dataclass(value) and not isinstance(value, type):
                return {k: enc(v) for k, v in dataclasses.asdict(value).items()}
            if isinstance(value, tuple):
                return [enc(v) for v in value]
            return value

        return {f.name: enc(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        def tup(d, *keys):
            for k in keys:
                if k in d and isinstance(d[k], list):
                    d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in d[k])
            return d

        kwargs = dict(doc)
        if "tree" in kwargs:
            kwargs["tree"] = TreeConfig(**tup(dict(kwargs["tree"]),
                                              "branching", "branch_angle_deg",
                                              "branch_length_mm"))
        for key, cls in (("nav", NavConfig), ("kin", KinematicsConfig),
                         ("servo", ServoParams), ("perturb", PerturbationConfig),
                         ("resp", RespirationConfig)):
            if key in kwargs:
                kwargs[key] = cls(**kwargs[key])
        if "advisor" in kwargs:
            adv = dict(kwargs["advisor"])
            if "plans" in adv:
                adv["plans"] = tuple(tuple(p) for p in adv["plans"])
            kwargs["advisor"] = AdvisorSpec(**adv)
        return RunConfig(**kwargs)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        return RunConfig.from_dict(json.loads(text))


def pick_target(tree: AirwayTree, generation: int, rank: int = 0) -> int:
    """Deterministic target selector: rank-th branch id at a generation."""
    ids = sorted(b.id for b in tree.branches if b.generation == generation)
    if not ids:
        raise KeyError(f"tree has no generation-{generation} branches")
    return ids[rank % len(ids)]


def resolve_target(cfg: RunConfig, tree: AirwayTree) -> tuple[int, float]:
    if cfg.target_branch >= 0:
        bid = cfg.target_branch
    else:
        bid = pick_target(tree, cfg.target_generation, cfg.target_rank)
    arc = tree.branch(bid).length * cfg.target_arc_frac
    return bid, arc


def obs_intrinsics(cfg: RunConfig) -> CameraIntrinsics:
    return NATIVE_INTRINSICS.scaled(cfg.obs_width, cfg.obs_height)


def build_session(cfg: RunConfig, tree: AirwayTree | None = None,
                  plan: PlannedPath | None = None) -> NavigationSession:
    """Construct the full stack a config describes (tree, bundle, agents)."""
    if tree is None:
        tree = generate_tree(cfg.tree_seed, cfg.tree)
    renderer = Renderer(obs_intrinsics(cfg))
    if plan is None:
        bid, arc = resolve_target(cfg, tree)
        plan = build_bundle(tree, bid, arc, renderer, cfg.spacing_mm)
    policy = None
    if cfg.mode == "autonomous":
        context = OracleContext(tree, cfg.kin, cfg.resp)
        policy = make_policy(cfg.policy, context, cfg.servo)
    advisor = cfg.advisor.build(tree, renderer, cfg.kin)
    surrogate = SurrogateModel(
        tree, renderer, cfg.kin,
        pose_jitter_sd_mm=cfg.surrogate_pose_jitter_mm,
        bend_jitter_sd_deg=cfg.surrogate_bend_jitter_deg,
        horizon=cfg.surrogate_horizon,
        seed=cfg.surrogate_seed,
    )
    header = {"schema": 1, "config": cfg.to_dict(), "mode": cfg.mode}
    return NavigationSession(tree, plan, policy, renderer,
                             nav=cfg.nav, kin=cfg.kin, perturb=cfg.perturb,
                             resp=cfg.resp, advisor=advisor, surrogate=surrogate,
                             header=header)
