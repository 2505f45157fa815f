"""The intraoperative control loop: observe, decide, arbitrate, execute.

Every step renders a perturbed observation, queries the reactive policy
against the active virtual target, evaluates the strategic triggers, and
routes any strategic proposal through the consensus rule: a preoperative
proposal executes only inside the reactive top-k_preop (otherwise it is
discarded), an advisor proposal executes inside top-k_advisor (otherwise the
world-model critic arbitrates). Executed SwitchTarget advances the waypoint;
reaching the terminal waypoint is success. The simulated clock charges every
decision: per-action inference latency, the 3 s execution dwell for motion,
and fixed guidance surcharges per consultation.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .airway import AirwayTree, RespirationConfig, deform, locate
from .critic import SurrogateModel, arbitrate
from .errors import AdvisorError, GuidanceUnavailableError
from .preop import PlannedPath, Waypoint
from .reactive import Logits, OracleContext, OraclePolicy, Policy, PolicyInput
from .render import (Frame, PerturbationConfig, Renderer, downsample,
                     frame_digest, POLICY_WIDTH, POLICY_HEIGHT)
from .sim import (Action, KinematicsConfig, ScopeState, action_from_name,
                  advance_clock, observe, reset, step)
from .strategic import (AdvisorClient, AdvisorPlan, GuidanceBuffer,
                        OracleAdvisorClient, Trigger, detect_trigger,
                        load_prompt, request_advice, vote_prior)

LOG_SCHEMA_VERSION = 1


class Source(enum.Enum):
    REACTIVE = "reactive"
    PREOP = "preop"
    ADVISOR = "advisor"
    CRITIC = "critic"
    DIRECTIVE = "directive"
    TELEOP = "teleop"


class Status(enum.Enum):
    SUCCESS = "success"
    WRONG_BRANCH = "wrong_branch"
    STALLED = "stalled"
    MAX_ACTIONS = "max_actions"
    RUNNING = "running"


@dataclass(frozen=True)
class NavConfig:
    k_preop: int = 3
    k_advisor: int = 5
    max_actions: int = 600
    wrong_branch_penetration_mm: float = 5.0
    critic_candidates: str = "conflict_pair"  # or "all_motion"
    stall_limit: int = 150
    preop_latency_s: float = 0.715
    advisor_latency_s: float = 42.339
    strategic_enabled: bool = True

    def validate(self) -> None:
        if not (1 <= self.k_preop <= 7 and 1 <= self.k_advisor <= 7):
            raise ValueError("consensus K values must be within [1, 7]")
        if self.critic_candidates not in ("conflict_pair", "all_motion"):
            raise ValueError("critic_candidates must be conflict_pair or all_motion")


@dataclass(frozen=True)
class RoutingDecision:
    """Outcome of the consensus rule before any critic involvement."""

    action: Action | None
    source: Source
    consensus: bool
    conflict: bool
    critic_candidates: tuple[Action, ...] = ()


def consensus(logits: Logits, proposal: tuple[Action, Source] | None,
              cfg: NavConfig = NavConfig()) -> RoutingDecision:
    """Route one step's decision between the reactive policy and a proposal.

    No proposal: reactive argmax. A preoperative proposal executes iff it
    ranks inside the top k_preop logits, else it is discarded and the
    reactive argmax runs (conflict). An advisor proposal executes iff inside
    top k_advisor, else the step is handed to the critic with either the
    conflicting pair or all motion actions as candidates.
    """
    best = logits.argmax
    if proposal is None:
        return RoutingDecision(best, Source.REACTIVE, consensus=False, conflict=False)
    prop_action, prop_source = proposal
    if prop_source is Source.PREOP:
        if prop_action in logits.top_k(cfg.k_preop):
            return RoutingDecision(prop_action, Source.PREOP, consensus=True, conflict=False)
        return RoutingDecision(best, Source.REACTIVE, consensus=False, conflict=True)
    if prop_source is Source.ADVISOR:
        if prop_action in logits.top_k(cfg.k_advisor):
            return RoutingDecision(prop_action, Source.ADVISOR, consensus=True, conflict=False)
        if cfg.critic_candidates == "all_motion":
            cands = tuple(a for a in Action if a.is_motion)
        else:
            pair = {prop_action}
            if best.is_motion:
                pair.add(best)
            cands = tuple(sorted(pair, key=lambda a: a.value))
        return RoutingDecision(None, Source.CRITIC, consensus=False, conflict=True,
                               critic_candidates=cands)
    raise ValueError(f"proposals cannot originate from {prop_source}")


@dataclass(frozen=True)
class Decision:
    step_index: int
    executed_action: Action
    source: Source
    consensus: bool
    conflict: bool
    logits_digest: str
    trigger: Trigger = Trigger.NONE


@dataclass(frozen=True)
class Outcome:
    status: Status
    final_state: ScopeState
    waypoint_reached: int
    generation_reached: int
    sim_time_s: float
    action_count: int


def _logits_digest(logits: Logits | None) -> str:
    if logits is None:
        return ""
    return hashlib.sha256(np.ascontiguousarray(logits.scores).tobytes()).hexdigest()[:16]


class TrajectoryLog:
    """Header plus one JSON line per executed action; replayable and digestible."""

    def __init__(self, header: dict):
        self.header = dict(header)
        self.lines: list[dict] = []

    def append(self, line: dict) -> None:
        self.lines.append(line)

    def to_jsonl(self) -> str:
        rows = [json.dumps({"type": "header", **self.header},
                           sort_keys=True, separators=(",", ":"))]
        rows += [json.dumps(line, sort_keys=True, separators=(",", ":"))
                 for line in self.lines]
        return "\n".join(rows) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "TrajectoryLog":
        rows = [json.loads(r) for r in text.strip().splitlines() if r.strip()]
        if not rows or rows[0].get("type") != "header":
            raise ValueError("trajectory log must start with a header line")
        header = {k: v for k, v in rows[0].items() if k != "type"}
        log = TrajectoryLog(header)
        log.lines = rows[1:]
        return log

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


class NavigationSession:
    """One sequential navigation episode over a prepared bundle.

    Autonomous mode drives itself through navigate_step(); teleop mode
    accepts explicit actions through apply_teleop() with identical kinematic,
    waypoint, and clock semantics, so both produce comparable logs.
    """

    def __init__(self, tree: AirwayTree, plan: PlannedPath, policy: Policy | None,
                 renderer: Renderer,
                 nav: NavConfig = NavConfig(),
                 kin: KinematicsConfig = KinematicsConfig(),
                 perturb: PerturbationConfig = PerturbationConfig(),
                 resp: RespirationConfig = RespirationConfig(),
                 advisor: AdvisorClient | None = None,
                 surrogate: SurrogateModel | None = None,
                 header: dict | None = None):
        nav.validate()
        kin.validate()
        if not plan.waypoints:
            raise ValueError("plan has no sampled waypoints")
        self.tree = tree
        self.plan = plan
        self.policy = policy
        self.renderer = renderer
        self.nav = nav
        self.kin = kin
        self.perturb = perturb
        self.resp = resp
        self.advisor = advisor
        self.surrogate = surrogate
        self.state = reset(tree, plan.waypoints[0].pose, kin)
        self.waypoint_index = 0
        self.guidance = GuidanceBuffer()
        first_prior = plan.waypoints[0].prior_action
        if first_prior is not None and first_prior.is_motion:
            self.guidance.push(first_prior)
        self.consulted: set[int] = set()
        self.pending_directive: Action | None = None
        self.advisor_queue: deque[Action] = deque()
        self.executed: list[Action] = []
        self.decisions: list[Decision] = []
        self.outcome: Outcome | None = None
        self.generation_reached = tree.branch(tree.root_id).generation
        self._since_advance = 0
        self._goal_cache: dict[int, Frame] = {}
        self.log = TrajectoryLog(header or {"schema": LOG_SCHEMA_VERSION})

    # -- helpers ----------------------------------------------------------

    @property
    def current_waypoint(self) -> Waypoint:
        return self.plan.waypoints[self.waypoint_index]

    def _goal_small(self, index: int) -> Frame:
        if index not in self._goal_cache:
            wp = self.plan.waypoints[index]
            if wp.virtual_frame is None:
                raise ValueError("plan waypoints carry no rendered targets")
            self._goal_cache[index] = downsample(wp.virtual_frame, POLICY_WIDTH, POLICY_HEIGHT)
        return self._goal_cache[index]

    def _advance_waypoint(self) -> None:
        if self.waypoint_index >= len(self.plan.waypoints) - 1:
            self._finish(Status.SUCCESS)
            return
        self.waypoint_index += 1
        self._since_advance = 0
        prior = self.plan.waypoints[self.waypoint_index].prior_action
        if prior is not None and prior.is_motion:
            self.guidance.push(prior)

    def _finish(self, status: Status) -> None:
        self.outcome = Outcome(
            status=status,
            final_state=self.state,
            waypoint_reached=self.waypoint_index,
            generation_reached=self.generation_reached,
            sim_time_s=self.state.sim_clock_s,
            action_count=len(self.executed),
        )

    def _post_execute_checks(self) -> None:
        if self.outcome is not None:
            return
        env = deform(self.tree, self.state.resp_time_s, self.resp)
        bid, _arc, pen = locate(env, self.state.pose.position)
        if bid is not None:
            if bid in self.plan.branch_chain:
                gen = env.branch(bid).generation
                self.generation_reached = max(self.generation_reached, gen)
            elif pen > self.nav.wrong_branch_penetration_mm:
                # require real clearance over every on-route branch so the
                # capsule overlap at a carina cannot trip a false positive
                p = self.state.pose.position.reshape(1, 3)
                on_chain_pen = max(
                    float(-env.packed.branch_sdf(p, cb)[0]) for cb in self.plan.branch_chain
                )
                if pen > on_chain_pen + 1.0:
                    self._finish(Status.WRONG_BRANCH)
                    return
        if len(self.executed) >= self.nav.max_actions:
            self._finish(Status.MAX_ACTIONS)
            return
        if self._since_advance >= self.nav.stall_limit:
            self._finish(Status.STALLED)

    def _log_step(self, decision: Decision, obs_digest: str, consult: str | None,
                  critic_table: list | None, surcharge: float) -> None:
        st = self.state
        self.log.append({
            "step": decision.step_index,
            "sim_clock": st.sim_clock_s,
            "action": decision.executed_action.wire_name,
            "source": decision.source.value,
            "consensus": decision.consensus,
            "conflict": decision.conflict,
            "trigger": decision.trigger.value,
            "consult": consult,
            "surcharge_s": surcharge,
            "position": [float(x) for x in st.pose.position],
            "forward": [float(x) for x in st.pose.forward],
            "bend_h": st.bend_h_deg,
            "bend_v": st.bend_v_deg,
            "waypoint_index": self.waypoint_index,
            "obs_digest": obs_digest,
            "logits_digest": decision.logits_digest,
            "critic": critic_table,
        })

    # -- the control loop --------------------------------------------------

    def navigate_step(self) -> Decision:
        """Run one decision cycle; returns the executed decision."""
        if self.outcome is not None:
            raise RuntimeError("session already terminated")
        step_index = len(self.executed)

        if self.pending_directive is not None:
            action = self.pending_directive
            self.pending_directive = None
            self.state = step(self.state, action, self.tree, self.resp, self.kin)
            self.executed.append(action)
            self._since_advance += 1
            decision = Decision(step_index, action, Source.DIRECTIVE,
                                consensus=False, conflict=False, logits_digest="")
            self.decisions.append(decision)
            self._log_step(decision, obs_digest="", consult=None,
                           critic_table=None, surcharge=0.0)
            self._post_execute_checks()
            return decision

        obs = observe(self.state, self.tree, self.renderer, self.perturb, self.resp)
        obs_small = downsample(obs, POLICY_WIDTH, POLICY_HEIGHT)
        goal_small = self._goal_small(self.waypoint_index)
        if isinstance(self.policy, OraclePolicy):
            self.policy.context.state = self.state
            self.policy.context.waypoint_pose = self.current_waypoint.pose
        logits = self.policy.decide(PolicyInput(obs_small, goal_small))

        # strategic proposal
        proposal: tuple[Action, Source] | None = None
        trigger = Trigger.NONE
        consult: str | None = None
        surcharge = 0.0
        stagnation_fired = False
        if self.advisor_queue:
            proposal = (self.advisor_queue.popleft(), Source.ADVISOR)
        elif self.nav.strategic_enabled:
            trigger = detect_trigger(self.executed, self.current_waypoint,
                                     self.waypoint_index in self.consulted)
            if trigger in (Trigger.STAGNATION_RECOVERY, Trigger.FORWARD_BIAS_CORRECTION):
                consult = "preop"
                surcharge = self.nav.preop_latency_s
                self.state = advance_clock(self.state, surcharge)
                try:
                    proposal = (vote_prior(self.guidance), Source.PREOP)
                except GuidanceUnavailableError:
                    proposal = None
                stagnation_fired = trigger is Trigger.STAGNATION_RECOVERY
            elif trigger is Trigger.PENULTIMATE_BIFURCATION:
                self.consulted.add(self.waypoint_index)
                consult = "advisor"
                surcharge = self.nav.advisor_latency_s
                self.state = advance_clock(self.state, surcharge)
                plan = self._consult_advisor(obs)
                if plan is not None:
                    proposal = (plan.actions[0], Source.ADVISOR)
                    self.advisor_queue.extend(plan.actions[1:])

        routing = consensus(logits, proposal, self.nav)
        critic_table = None
        if routing.source is Source.CRITIC:
            action, critic_table = self._run_critic(routing, logits, step_index)
            source = Source.CRITIC if action not in (Action.SWITCH_TARGET,) else Source.REACTIVE
            decision = Decision(step_index, action, source, consensus=False,
                                conflict=True, logits_digest=_logits_digest(logits),
                                trigger=trigger)
            self.advisor_queue.clear()  # plan aborts on first critic resolution
        else:
            action = routing.action
            decision = Decision(step_index, action, routing.source,
                                consensus=routing.consensus, conflict=routing.conflict,
                                logits_digest=_logits_digest(logits), trigger=trigger)

        # execute
        self.state = step(self.state, action, self.tree, self.resp, self.kin)
        self.executed.append(action)
        if action is Action.SWITCH_TARGET:
            self._advance_waypoint()
        else:
            self._since_advance += 1
        if stagnation_fired:
            self.pending_directive = Action.FORWARD
        self.decisions.append(decision)
        self._log_step(decision, frame_digest(obs), consult, critic_table, surcharge)
        self._post_execute_checks()
        return decision

    def _consult_advisor(self, obs: Frame) -> AdvisorPlan | None:
        if self.advisor is None:
            return None
        wp = self.current_waypoint
        if isinstance(self.advisor, OracleAdvisorClient):
            self.advisor.bind(self.state, wp)
        if wp.prompt_frame is None:
            return None
        context = load_prompt("user_prompt.txt").format(
            waypoint_index=wp.index,
            waypoint_count=len(self.plan.waypoints),
            context=f"target branch {self.plan.target_branch}, "
                    f"{len(self.plan.waypoints) - wp.index - 1} waypoints remain",
        )
        try:
            return request_advice(self.advisor, obs, wp.prompt_frame, context)
        except AdvisorError:
            return None

    def _run_critic(self, routing: RoutingDecision, logits: Logits,
                    step_index: int):
        best = logits.argmax
        if not routing.critic_candidates:
            return best, None
        if best is Action.SWITCH_TARGET:
            # switching is intrinsic to the reactive policy; the critic only
            # ranks motion, so a switch argmax wins the conflict outright
            return Action.SWITCH_TARGET, None
        if self.surrogate is None:
            return best, None
        target = self.current_waypoint.virtual_frame
        chosen, scores = arbitrate(self.surrogate, self.state,
                                   list(routing.critic_candidates), target)
        table = [{"action": cs.action.wire_name, "distance": cs.distance}
                 for cs in scores]
        return chosen, table

    # -- teleop ------------------------------------------------------------

    def apply_teleop(self, action: Action) -> Decision:
        """Execute one human-issued command with autonomous-identical semantics."""
        if self.outcome is not None:
            raise RuntimeError("session already terminated")
        step_index = len(self.executed)
        self.state = step(self.state, action, self.tree, self.resp, self.kin)
        self.executed.append(action)
        if action is Action.SWITCH_TARGET:
            self._advance_waypoint()
        else:
            self._since_advance += 1
        decision = Decision(step_index, action, Source.TELEOP,
                            consensus=False, conflict=False, logits_digest="")
        self.decisions.append(decision)
        self._log_step(decision, obs_digest="", consult=None,
                       critic_table=None, surcharge=0.0)
        self._post_execute_checks()
        return decision


def run_trajectory(session: NavigationSession) -> tuple[Outcome, TrajectoryLog]:
    """Drive an autonomous session to termination; deterministic given seeds."""
    while session.outcome is None:
        session.navigate_step()
    return session.outcome, session.log


def reconstruct_sim_time(log: TrajectoryLog, kin: KinematicsConfig) -> float:
    """Closed-form clock audit: replay the per-event charges in log order."""
    t = 0.0
    for line in log.lines:
        t += line.get("surcharge_s", 0.0)
        t += kin.clock_charge(action_from_name(line["action"]))
    return t
