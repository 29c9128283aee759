"""Deterministic two-agent Overcooked-style kitchen.

Soup recipe is three onions; a pot starts cooking automatically when the
third onion goes in and is ready ``COOK_TIME`` steps later. Delivering a
soup at a serving window pays ``DELIVERY_REWARD`` to both agents; serving
anything else consumes the item and pays nothing (an invalid delivery).

Layout text legend::

    .  floor            X  counter          O  onion dispenser
    D  dish dispenser   P  pot              S  serving window
    1  agent 1 start    2  agent 2 start    (both on floor)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

COOK_TIME = 20
POT_CAPACITY = 3
DELIVERY_REWARD = 20.0
DEFAULT_HORIZON = 200
N_AGENTS = 2


class Cell(IntEnum):
    FLOOR = 0
    COUNTER = 1
    ONION_DISPENSER = 2
    DISH_DISPENSER = 3
    POT = 4
    SERVE = 5


class Action(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    STAY = 4
    INTERACT = 5


class Item(IntEnum):
    NONE = 0
    ONION = 1
    DISH = 2
    SOUP = 3


N_ACTIONS = len(Action)

# indexed by facing direction, which shares numbering with the move actions
DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))

CHAR_TO_CELL = {
    ".": Cell.FLOOR,
    "X": Cell.COUNTER,
    "O": Cell.ONION_DISPENSER,
    "D": Cell.DISH_DISPENSER,
    "P": Cell.POT,
    "S": Cell.SERVE,
}
CELL_TO_CHAR = {v: k for k, v in CHAR_TO_CELL.items()}


class LayoutError(ValueError):
    pass


class MalformedGrid(LayoutError):
    pass


class MissingEntity(LayoutError):
    pass


class EpisodeFinished(RuntimeError):
    pass


BUILTIN_LAYOUTS = {
    # one pot, one shared open room
    "cramped_room": """\
XXPXX
O..2O
X1..X
XDXSX
""",
    # a counter wall splits the kitchen; the left side holds onions and
    # dishes, the right side holds pots and the window
    "forced_coordination": """\
XXXPX
O.X1P
O2X.X
D.X.X
XXXSX
""",
    # one-cell-wide corridor looping around a central counter
    "coordination_ring": """\
XXXPX
X..1P
D.X.X
O2..X
XOSXX
""",
    # two self-sufficient halves with mirrored, unequal travel distances
    "asymmetric_advantages": """\
XXXXXXXXX
O.XSXOX.S
X...P...X
X.1.P.2.X
XXXDXDXXX
""",
}


# ---------------------------------------------------------------------------
# feature schema


@dataclass(frozen=True)
class FeatureSchema:
    """Names (with semantics) of the per-step instrumentation features."""

    per_agent: tuple[tuple[str, str], ...]
    global_: tuple[tuple[str, str], ...]
    n_agents: int = N_AGENTS

    @property
    def per_agent_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.per_agent)

    @property
    def global_names(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.global_)

    @property
    def digest(self) -> str:
        payload = json.dumps(
            {"per_agent": self.per_agent_names, "global": self.global_names, "n": self.n_agents}
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def describe(self) -> str:
        lines = [f"per-agent features (index with [0]..[{self.n_agents - 1}] or [i]):"]
        lines += [f"  x.{name}[k]: {doc}" for name, doc in self.per_agent]
        lines.append("global features:")
        lines += [f"  x.{name}: {doc}" for name, doc in self.global_]
        return "\n".join(lines)


FEATURE_SCHEMA = FeatureSchema(
    per_agent=(
        ("onion_pickup", "1 if the agent took an onion from a dispenser this step"),
        ("onion_potted", "1 if the agent put an onion into a pot this step"),
        ("dish_pickup", "1 if the agent took a dish from a dispenser this step"),
        ("soup_pickup", "1 if the agent ladled a finished soup from a pot this step"),
        ("delivery", "1 if the agent delivered a soup this step"),
        ("invalid_delivery", "1 if the agent served a non-soup item this step"),
        ("collision", "1 if the agents blocked each other this step (flagged for both)"),
        ("useful_interact", "1 if the agent's interact changed the world this step"),
        ("dist_to_nearest_pot", "Manhattan distance to the nearest pot after the step"),
        ("dist_to_nearest_serve", "Manhattan distance to the nearest serving window after the step"),
        ("holding_code", "held item after the step: 0 none, 1 onion, 2 dish, 3 soup"),
    ),
    global_=(
        ("pot_fullness", "total onions currently in pots"),
        ("pots_cooking", "number of pots cooking"),
        ("pots_ready", "number of pots with a finished soup"),
        ("deliveries_cum", "soups delivered so far this episode"),
        ("sparse_reward", "task reward paid this step"),
    ),
)

_EVENTS = ("onion_pickup", "onion_potted", "dish_pickup", "soup_pickup", "delivery", "invalid_delivery", "useful_interact")


class FeatureVector(dict):
    """Feature name -> value; per-agent entries are tuples indexed by agent."""

    def __init__(self, values=(), schema_hash: str = FEATURE_SCHEMA.digest):
        super().__init__(values)
        self.schema_hash = schema_hash


# ---------------------------------------------------------------------------
# layouts


@dataclass(frozen=True, eq=False)
class Layout:
    name: str
    grid: tuple[tuple[Cell, ...], ...]
    starts: tuple[tuple[int, int, int], ...]
    horizon: int = DEFAULT_HORIZON
    n_agents: int = N_AGENTS
    # derived, filled in __post_init__
    pots: tuple[tuple[int, int], ...] = field(init=False)
    counters: tuple[tuple[int, int], ...] = field(init=False)
    _cells_of: dict = field(init=False, repr=False)
    _nearest: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.horizon < 1:
            raise LayoutError("horizon must be >= 1")
        if len(self.starts) != self.n_agents:
            raise MissingEntity(f"expected {self.n_agents} agent starts, found {len(self.starts)}")
        for r, c, _ in self.starts:
            if self.grid[r][c] != Cell.FLOOR:
                raise MalformedGrid(f"agent start ({r}, {c}) is not on floor")
        cells_of = {kind: [] for kind in Cell}
        for r, row in enumerate(self.grid):
            for c, kind in enumerate(row):
                cells_of[kind].append((r, c))
        for kind in (Cell.POT, Cell.ONION_DISPENSER, Cell.DISH_DISPENSER, Cell.SERVE):
            if not cells_of[kind]:
                raise MissingEntity(f"layout has no {kind.name.lower()}")
        object.__setattr__(self, "_cells_of", {k: tuple(v) for k, v in cells_of.items()})
        object.__setattr__(self, "pots", self._cells_of[Cell.POT])
        object.__setattr__(self, "counters", self._cells_of[Cell.COUNTER])
        nearest = {}
        for kind in (Cell.POT, Cell.ONION_DISPENSER, Cell.DISH_DISPENSER, Cell.SERVE):
            targets = self._cells_of[kind]
            table = {}
            for r, c in self._cells_of[Cell.FLOOR]:
                table[(r, c)] = min(((abs(r - tr) + abs(c - tc), tr, tc) for tr, tc in targets))
            nearest[kind] = table
        object.__setattr__(self, "_nearest", nearest)

    @property
    def height(self) -> int:
        return len(self.grid)

    @property
    def width(self) -> int:
        return len(self.grid[0])

    def cells(self, kind: Cell) -> tuple[tuple[int, int], ...]:
        return self._cells_of[kind]

    def nearest(self, kind: Cell, pos: tuple[int, int]) -> tuple[int, int, int]:
        """(manhattan distance, row, col) of the closest cell of ``kind``."""
        return self._nearest[kind][pos]

    def to_text(self) -> str:
        rows = [[CELL_TO_CHAR[k] for k in row] for row in self.grid]
        for i, (r, c, _) in enumerate(self.starts):
            rows[r][c] = str(i + 1)
        return "".join("".join(row) + "\n" for row in rows)

    def components(self) -> list[set[tuple[int, int]]]:
        """Connected regions of floor cells (4-neighbourhood)."""
        floor = set(self._cells_of[Cell.FLOOR])
        seen, out = set(), []
        for start in sorted(floor):
            if start in seen:
                continue
            comp, stack = set(), [start]
            while stack:
                p = stack.pop()
                if p in comp:
                    continue
                comp.add(p)
                for dr, dc in DELTAS:
                    q = (p[0] + dr, p[1] + dc)
                    if q in floor and q not in comp:
                        stack.append(q)
            seen |= comp
            out.append(comp)
        return out


def load_layout(source: str, name: str | None = None, horizon: int = DEFAULT_HORIZON) -> Layout:
    """Build a Layout from a built-in name or from layout text."""
    if source in BUILTIN_LAYOUTS:
        name = name or source
        source = BUILTIN_LAYOUTS[source]
    rows = [line.rstrip("\r") for line in source.split("\n")]
    while rows and rows[-1] == "":
        rows.pop()
    if not rows:
        raise MalformedGrid("empty layout")
    width = len(rows[0])
    starts: dict[int, tuple[int, int, int]] = {}
    grid = []
    for r, line in enumerate(rows):
        if len(line) != width:
            raise MalformedGrid(f"row {r} has length {len(line)}, expected {width}")
        row = []
        for c, ch in enumerate(line):
            if ch in CHAR_TO_CELL:
                row.append(CHAR_TO_CELL[ch])
            elif ch in "12":
                idx = int(ch) - 1
                if idx in starts:
                    raise MalformedGrid(f"duplicate start for agent {ch}")
                starts[idx] = (r, c, int(Action.UP))
                row.append(Cell.FLOOR)
            else:
                raise MalformedGrid(f"unknown character {ch!r} at row {r}, col {c}")
        grid.append(tuple(row))
    if sorted(starts) != list(range(len(starts))):
        raise MissingEntity("agent starts must be numbered from 1")
    return Layout(
        name=name or "custom",
        grid=tuple(grid),
        starts=tuple(starts[i] for i in sorted(starts)),
        horizon=horizon,
    )


# ---------------------------------------------------------------------------
# dynamics


@dataclass(frozen=True)
class EnvState:
    poses: tuple[tuple[int, int, int], ...]  # (row, col, facing) per agent
    held: tuple[int, ...]
    pots: tuple[tuple[int, int], ...]  # (onion_count, cook_timer), aligned to layout.pots
    counter_items: tuple[int, ...]  # aligned to layout.counters
    tick: int = 0
    deliveries: int = 0

    def pot_ready(self, k: int) -> bool:
        count, timer = self.pots[k]
        return count == POT_CAPACITY and timer == 0


@dataclass(frozen=True)
class StepOutcome:
    next_state: EnvState
    sparse_reward: float
    features: FeatureVector
    done: bool


class Overcooked:
    """Pure-function simulator bound to one layout."""

    def __init__(self, layout: Layout | str):
        if isinstance(layout, str):
            layout = load_layout(layout)
        self.layout = layout
        self.horizon = layout.horizon
        self.n_agents = layout.n_agents
        self.schema = FEATURE_SCHEMA
        self._pot_index = {p: k for k, p in enumerate(layout.pots)}
        self._counter_index = {p: k for k, p in enumerate(layout.counters)}
        self._grid = layout.grid
        h, w = layout.height, layout.width
        self.agent_block_dim = h + w + 4 + 4 + 11 + 2 * len(layout.pots) + len(Cell) + len(Item)
        self.global_dim = 3 * len(layout.pots) + 3 + 1
        self.obs_dim = self.agent_block_dim + 2 + 4 + 4 + self.global_dim + 1
        self.state_dim = 2 * self.agent_block_dim + self.global_dim

    # -- reset / step -----------------------------------------------------

    def reset(self, seed: int = 0) -> EnvState:
        # the simulator has no stochastic elements; seed is accepted for interface parity
        del seed
        lay = self.layout
        return EnvState(
            poses=tuple(lay.starts),
            held=(Item.NONE,) * lay.n_agents,
            pots=((0, 0),) * len(lay.pots),
            counter_items=(Item.NONE,) * len(lay.counters),
        )

    def _walkable(self, r: int, c: int) -> bool:
        return 0 <= r < self.layout.height and 0 <= c < self.layout.width and self._grid[r][c] == Cell.FLOOR

    def step(self, state: EnvState, joint_action) -> StepOutcome:
        if state.tick >= self.horizon:
            raise EpisodeFinished("episode already reached its horizon")
        n = self.n_agents
        actions = [int(a) for a in joint_action]
        if len(actions) != n or any(not 0 <= a < N_ACTIONS for a in actions):
            raise ValueError(f"joint action must hold {n} actions in 0..{N_ACTIONS - 1}")

        pots = [(cnt, t - 1 if t > 0 else 0) for cnt, t in state.pots]

        # movement: facing always follows the move; conflicts cancel both moves
        facing = [p[2] for p in state.poses]
        current = [(p[0], p[1]) for p in state.poses]
        intended = list(current)
        for i, a in enumerate(actions):
            if a < 4:
                facing[i] = a
                dr, dc = DELTAS[a]
                tgt = (current[i][0] + dr, current[i][1] + dc)
                if self._walkable(*tgt):
                    intended[i] = tgt
        collision = 0
        if intended[0] == intended[1] or (intended[0] == current[1] and intended[1] == current[0]):
            intended = current
            collision = 1
        poses = tuple((intended[i][0], intended[i][1], facing[i]) for i in range(n))

        held = list(state.held)
        counters = list(state.counter_items)
        events = {k: [0] * n for k in _EVENTS}
        reward = 0.0
        deliveries = state.deliveries
        for i, a in enumerate(actions):
            if a != Action.INTERACT:
                continue
            r, c, f = poses[i]
            dr, dc = DELTAS[f]
            fr, fc = r + dr, c + dc
            if not (0 <= fr < self.layout.height and 0 <= fc < self.layout.width):
                continue
            kind = self._grid[fr][fc]
            h = held[i]
            changed = True
            if kind == Cell.ONION_DISPENSER and h == Item.NONE:
                held[i] = Item.ONION
                events["onion_pickup"][i] = 1
            elif kind == Cell.DISH_DISPENSER and h == Item.NONE:
                held[i] = Item.DISH
                events["dish_pickup"][i] = 1
            elif kind == Cell.POT:
                k = self._pot_index[(fr, fc)]
                cnt, t = pots[k]
                if h == Item.ONION and cnt < POT_CAPACITY:
                    cnt += 1
                    pots[k] = (cnt, COOK_TIME if cnt == POT_CAPACITY else 0)
                    held[i] = Item.NONE
                    events["onion_potted"][i] = 1
                elif h == Item.DISH and cnt == POT_CAPACITY and t == 0:
                    pots[k] = (0, 0)
                    held[i] = Item.SOUP
                    events["soup_pickup"][i] = 1
                else:
                    changed = False
            elif kind == Cell.SERVE and h != Item.NONE:
                if h == Item.SOUP:
                    reward += DELIVERY_REWARD
                    deliveries += 1
                    events["delivery"][i] = 1
                else:
                    events["invalid_delivery"][i] = 1
                held[i] = Item.NONE
            elif kind == Cell.COUNTER:
                k = self._counter_index[(fr, fc)]
                if h != Item.NONE and counters[k] == Item.NONE:
                    counters[k] = h
                    held[i] = Item.NONE
                elif h == Item.NONE and counters[k] != Item.NONE:
                    got = counters[k]
                    counters[k] = Item.NONE
                    held[i] = got
                else:
                    changed = False
            else:
                changed = False
            events["useful_interact"][i] = int(changed)

        nxt = EnvState(
            poses=poses,
            held=tuple(held),
            pots=tuple(pots),
            counter_items=tuple(counters),
            tick=state.tick + 1,
            deliveries=deliveries,
        )
        feats = FeatureVector({k: tuple(v) for k, v in events.items()})
        feats["collision"] = (collision,) * n
        feats["dist_to_nearest_pot"] = tuple(
            self.layout.nearest(Cell.POT, (p[0], p[1]))[0] for p in poses
        )
        feats["dist_to_nearest_serve"] = tuple(
            self.layout.nearest(Cell.SERVE, (p[0], p[1]))[0] for p in poses
        )
        feats["holding_code"] = tuple(int(x) for x in held)
        feats["pot_fullness"] = sum(cnt for cnt, _ in pots)
        feats["pots_cooking"] = sum(1 for _, t in pots if t > 0)
        feats["pots_ready"] = sum(1 for cnt, t in pots if cnt == POT_CAPACITY and t == 0)
        feats["deliveries_cum"] = deliveries
        feats["sparse_reward"] = reward
        return StepOutcome(nxt, reward, feats, nxt.tick >= self.horizon)

    # -- encodings --------------------------------------------------------

    def _agent_block(self, state: EnvState, j: int) -> list[float]:
        lay = self.layout
        r, c, f = state.poses[j]
        h, w = lay.height, lay.width
        out = [0.0] * (h + w + 4 + 4)
        out[r] = 1.0
        out[h + c] = 1.0
        out[h + w + f] = 1.0
        out[h + w + 4 + state.held[j]] = 1.0
        for kind in (Cell.POT, Cell.ONION_DISPENSER, Cell.DISH_DISPENSER, Cell.SERVE):
            _, tr, tc = lay.nearest(kind, (r, c))
            out += [(tr - r) / h, (tc - c) / w]
        for pr, pc in lay.pots:
            out += [(pr - r) / h, (pc - c) / w]
        # nearest counter holding something, plus an existence flag
        best = None
        for k, item in enumerate(state.counter_items):
            if item != Item.NONE:
                cr, cc = lay.counters[k]
                d = abs(cr - r) + abs(cc - c)
                if best is None or d < best[0]:
                    best = (d, cr, cc)
        if best is None:
            out += [0.0, 0.0, 0.0]
        else:
            out += [(best[1] - r) / h, (best[2] - c) / w, 1.0]
        # what the agent is facing
        cell = [0.0] * len(Cell)
        item = [0.0] * len(Item)
        fr, fc = r + DELTAS[f][0], c + DELTAS[f][1]
        if 0 <= fr < h and 0 <= fc < w:
            kind = self._grid[fr][fc]
            cell[kind] = 1.0
            if kind == Cell.COUNTER:
                item[state.counter_items[self._counter_index[(fr, fc)]]] = 1.0
            elif kind == Cell.POT:
                cnt, t = state.pots[self._pot_index[(fr, fc)]]
                item[Item.SOUP if (cnt == POT_CAPACITY and t == 0) else Item.ONION if cnt else Item.NONE] = 1.0
        else:
            cell[Cell.COUNTER] = 1.0
        return out + cell + item

    def _global_block(self, state: EnvState) -> list[float]:
        out = []
        for cnt, t in state.pots:
            out += [cnt / POT_CAPACITY, t / COOK_TIME, float(cnt == POT_CAPACITY and t == 0)]
        on_counters = [0.0, 0.0, 0.0]
        for item in state.counter_items:
            if item != Item.NONE:
                on_counters[item - 1] += 1.0
        out += [v / max(1, len(state.counter_items)) for v in on_counters]
        out.append(state.tick / self.horizon)
        return out

    def observe(self, state: EnvState, agent: int) -> np.ndarray:
        """Local observation for one agent (its actor input)."""
        if not 0 <= agent < self.n_agents:
            raise IndexError(agent)
        other = 1 - agent
        r, c, _ = state.poses[agent]
        orow, ocol, ofac = state.poses[other]
        rel = [(orow - r) / self.layout.height, (ocol - c) / self.layout.width]
        ofacing = [0.0] * 4
        ofacing[ofac] = 1.0
        oheld = [0.0] * len(Item)
        oheld[state.held[other]] = 1.0
        vec = self._agent_block(state, agent) + rel + ofacing + oheld + self._global_block(state) + [float(agent)]
        return np.asarray(vec, dtype=np.float64)

    def global_state(self, state: EnvState) -> np.ndarray:
        """Agent blocks in agent order followed by the shared block (critic input)."""
        vec = self._agent_block(state, 0) + self._agent_block(state, 1) + self._global_block(state)
        return np.asarray(vec, dtype=np.float64)

    # -- rendering --------------------------------------------------------

    def render(self, state: EnvState) -> str:
        lay = self.layout
        rows = [[CELL_TO_CHAR[k] for k in row] for row in lay.grid]
        for k, item in enumerate(state.counter_items):
            if item != Item.NONE:
                r, c = lay.counters[k]
                rows[r][c] = "odS"[item - 1]
        arrows = "^v<>"
        for i, (r, c, f) in enumerate(state.poses):
            rows[r][c] = str(i + 1)
        lines = ["".join(row) for row in rows]
        held = " ".join(
            f"{i + 1}{arrows[p[2]]}:{Item(state.held[i]).name.lower()}" for i, p in enumerate(state.poses)
        )
        pots = " ".join(
            f"P{k}:{cnt}/{POT_CAPACITY}" + (" ready" if state.pot_ready(k) else f" t={t}" if t else "")
            for k, (cnt, t) in enumerate(state.pots)
        )
        lines.append(f"t={state.tick} delivered={state.deliveries} | {held} | {pots}")
        return "\n".join(lines)

