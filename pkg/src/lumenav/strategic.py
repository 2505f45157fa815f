"""Long-term strategic guidance: preoperative voting and the advisor client.

The strategic layer is event-driven. Preoperative guidance replays the
planned route's action priors through a 10-slot ring buffer and majority
vote; it is consulted on stagnation (a run of bends with no translation) or
forward bias (a run of forwards). The advisor is an external multimodal
model consulted once at the penultimate bifurcation through a JSON wire
protocol; a privileged greedy-rollout oracle stands in for it in tests and
offline runs.
"""

from __future__ import annotations

import base64
import importlib.resources
import io
import json
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .airway import AirwayTree, RespirationConfig
from .errors import AdvisorError, GuidanceUnavailableError
from .metrics import perceptual_distance
from .preop import Waypoint
from .render import Frame, Renderer, Style, write_pgm
from .sim import Action, MOTION_ACTIONS, KinematicsConfig, ScopeState, step

GUIDANCE_WINDOW = 10
STAGNATION_BEND_RUN = 8
FORWARD_BIAS_RUN = 3
ADVISOR_MAX_STEPS = 5

_COMMAND_NAMES = {
    "forward": Action.FORWARD,
    "backward": Action.BACKWARD,
    "left": Action.BEND_LEFT,
    "right": Action.BEND_RIGHT,
    "up": Action.BEND_UP,
    "down": Action.BEND_DOWN,
}


class Trigger(Enum):
    STAGNATION_RECOVERY = "stagnation_recovery"
    FORWARD_BIAS_CORRECTION = "forward_bias_correction"
    PENULTIMATE_BIFURCATION = "penultimate_bifurcation"
    NONE = "none"


class GuidanceBuffer:
    """Ring buffer of the priors of the 10 most recently entered transitions."""

    def __init__(self):
        self._items: deque[Action] = deque(maxlen=GUIDANCE_WINDOW)

    def push(self, action: Action) -> None:
        self._items.append(action)

    def __len__(self) -> int:
        return len(self._items)

    def snapshot(self) -> tuple[Action, ...]:
        return tuple(self._items)


def vote_prior(buffer: GuidanceBuffer | list[Action]) -> Action:
    """Temporal majority vote; ties go to the most recently added candidate."""
    items = list(buffer.snapshot() if isinstance(buffer, GuidanceBuffer) else buffer)
    if not items:
        raise GuidanceUnavailableError("guidance buffer is empty")
    counts: dict[Action, int] = {}
    last_pos: dict[Action, int] = {}
    for i, a in enumerate(items):
        counts[a] = counts.get(a, 0) + 1
        last_pos[a] = i
    best = max(counts.values())
    tied = [a for a, c in counts.items() if c == best]
    return max(tied, key=lambda a: last_pos[a])


def _trailing_run(executed: list[Action], predicate) -> int:
    n = 0
    for a in reversed(executed):
        if not predicate(a):
            break
        n += 1
    return n


def detect_trigger(executed: list[Action], waypoint: Waypoint,
                   advisor_consulted: bool) -> Trigger:
    """One trigger per step, precedence Stagnation > ForwardBias > Penultimate.

    `executed` is the ordered oldest-to-newest list of actions actually
    executed so far. A trigger fires exactly when its uninterrupted trailing
    run reaches the threshold (the 8th consecutive bend, the 3rd consecutive
    forward), not again while the same run keeps growing; re-firing every
    step would let the consulted guidance reinforce the very bias it is
    meant to correct.
    """
    if _trailing_run(executed, lambda a: a.is_bend) == STAGNATION_BEND_RUN:
        return Trigger.STAGNATION_RECOVERY
    if _trailing_run(executed, lambda a: a is Action.FORWARD) == FORWARD_BIAS_RUN:
        return Trigger.FORWARD_BIAS_CORRECTION
    if waypoint.is_penultimate_bifurcation and not advisor_consulted:
        return Trigger.PENULTIMATE_BIFURCATION
    return Trigger.NONE


@dataclass(frozen=True)
class AdvisorPlan:
    """One to five motion actions plus the advisor's stated rationale."""

    actions: tuple[Action, ...]
    rationale: str = ""

    def __post_init__(self):
        if not (1 <= len(self.actions) <= ADVISOR_MAX_STEPS):
            raise ValueError("advisor plan must contain 1 to 5 actions")
        if any(not a.is_motion for a in self.actions):
            raise ValueError("advisor plans contain motion actions only")


def load_prompt(name: str) -> str:
    return importlib.resources.files("lumenav.prompts").joinpath(name).read_text()


def parse_advisor_reply(doc: dict) -> AdvisorPlan:
    """Parse {steps: [{command, reasoning}]}; unknown commands are dropped."""
    steps = doc.get("steps")
    if not isinstance(steps, list):
        raise AdvisorError("reply missing 'steps' list")
    actions: list[Action] = []
    reasons: list[str] = []
    for entry in steps[:ADVISOR_MAX_STEPS]:
        cmd = str(entry.get("command", "")).strip().lower()
        if cmd in _COMMAND_NAMES:
            actions.append(_COMMAND_NAMES[cmd])
            reasons.append(str(entry.get("reasoning", "")))
    if not actions:
        raise AdvisorError("no usable commands in advisor reply")
    return AdvisorPlan(tuple(actions), " / ".join(r for r in reasons if r))


class AdvisorClient:
    """Interface for the external advisor; advise() returns the raw reply dict."""

    def advise(self, request: dict) -> dict:
        raise NotImplementedError


class HttpAdvisorClient(AdvisorClient):
    """POSTs the request JSON to an HTTP endpoint and returns the JSON reply."""

    def __init__(self, url: str, timeout_s: float = 60.0):
        self.url = url
        self.timeout_s = timeout_s

    def advise(self, request: dict) -> dict:
        import httpx

        try:
            resp = httpx.post(self.url, json=request, timeout=self.timeout_s)
            resp.raise_for_status()
            return resp.json()
        except Exception as exc:  # transport, timeout, JSON decode
            raise AdvisorError(f"advisor transport failure: {exc}") from exc


class ScriptedAdvisorClient(AdvisorClient):
    """Deterministic stub: replays canned command lists, cycling as needed."""

    def __init__(self, plans: list[list[str]]):
        if not plans:
            raise ValueError("need at least one scripted plan")
        self.plans = plans
        self.calls = 0

    def advise(self, request: dict) -> dict:
        plan = self.plans[self.calls % len(self.plans)]
        self.calls += 1
        return {"steps": [{"command": c, "reasoning": "scripted"} for c in plan]}


def _frame_b64(frame: Frame) -> str:
    buf = io.BytesIO()
    data = np.clip(np.rint(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    buf.write(f"P5\n{frame.width} {frame.height}\n255\n".encode())
    buf.write(data.tobytes())
    return base64.b64encode(buf.getvalue()).decode()


def build_advisor_request(obs: Frame, prompt_frame: Frame, context: str) -> dict:
    return {
        "observation_pgm_b64": _frame_b64(obs),
        "prompt_pgm_b64": _frame_b64(prompt_frame),
        "system_prompt": load_prompt("system_prompt.txt"),
        "user_prompt": context,
    }


def request_advice(client: AdvisorClient, obs: Frame, prompt_frame: Frame,
                   context: str) -> AdvisorPlan:
    """Send observation + arrow-annotated target + text; parse the JSON reply.

    Malformed or out-of-vocabulary commands are dropped; an empty usable set
    is an advisor error (the caller falls back to the reactive decision).
    """
    reply = client.advise(build_advisor_request(obs, prompt_frame, context))
    if not isinstance(reply, dict):
        raise AdvisorError("advisor reply is not a JSON object")
    return parse_advisor_reply(reply)


def oracle_advise(state: ScopeState, waypoint: Waypoint, tree: AirwayTree,
                  renderer: Renderer,
                  kin: KinematicsConfig = KinematicsConfig(),
                  resp: RespirationConfig = RespirationConfig(),
                  max_steps: int = ADVISOR_MAX_STEPS) -> AdvisorPlan:
    """Privileged greedy stand-in for the external advisor.

    Simulates every motion action for up to five greedy steps, at each step
    keeping the action whose clean rendered view is perceptually closest to
    the waypoint's virtual target; stops early once no action improves.
    """
    if waypoint.virtual_frame is None:
        raise AdvisorError("waypoint has no rendered virtual target")
    target = waypoint.virtual_frame
    current = state
    chosen: list[Action] = []
    prev_best = None
    for _ in range(max_steps):
        best_action, best_dist, best_state = None, np.inf, None
        for action in MOTION_ACTIONS:
            nxt = step(current, action, tree, resp, kin)
            view = renderer.render(tree, nxt.pose, Style.VIRTUAL)
            dist = perceptual_distance(view, target)
            if dist < best_dist:
                best_action, best_dist, best_state = action, dist, nxt
        if prev_best is not None and best_dist >= prev_best:
            break
        chosen.append(best_action)
        current = best_state
        prev_best = best_dist
    if not chosen:
        chosen = [Action.FORWARD]
    return AdvisorPlan(tuple(chosen), "greedy rollout toward the virtual target")


class OracleAdvisorClient(AdvisorClient):
    """Wire-compatible wrapper around oracle_advise for in-process sessions.

    The navigation loop injects the privileged context before each call; the
    wire request payload is accepted and ignored.
    """

    def __init__(self, tree: AirwayTree, renderer: Renderer,
                 kin: KinematicsConfig = KinematicsConfig(),
                 resp: RespirationConfig = RespirationConfig()):
        self.tree = tree
        self.renderer = renderer
        self.kin = kin
        self.resp = resp
        self.state: ScopeState | None = None
        self.waypoint: Waypoint | None = None

    def bind(self, state: ScopeState, waypoint: Waypoint) -> None:
        self.state = state
        self.waypoint = waypoint

    def advise(self, request: dict) -> dict:
        if self.state is None or self.waypoint is None:
            raise AdvisorError("oracle advisor not bound to a session state")
        plan = oracle_advise(self.state, self.waypoint, self.tree, self.renderer,
                             self.kin, self.resp)
        reverse = {v: k for k, v in _COMMAND_NAMES.items()}
        return {"steps": [{"command": reverse[a].capitalize(), "reasoning": plan.rationale}
                          for a in plan.actions]}
