"""Scene graphs: rooms, objects with states and capabilities, and relations.

Every node carries a small integer id unique within the scene; generation
caps the total node count at 64 so ids survive the 64-bucket token encoding
losslessly. Objects remember their initial placement (`home`) so PUTOBJBACK
has a well-defined target.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Set, Tuple

import numpy as np

# states
OPEN, CLOSED = "OPEN", "CLOSED"
ON, OFF = "ON", "OFF"
DIRTY, CLEAN = "DIRTY", "CLEAN"
PLUGGED_IN, PLUGGED_OUT = "PLUGGED_IN", "PLUGGED_OUT"
SITTING = "SITTING"
STATES = (OPEN, CLOSED, ON, OFF, DIRTY, CLEAN, PLUGGED_IN, PLUGGED_OUT, SITTING)

# capabilities
GRABBABLE = "GRABBABLE"
CONTAINER = "CONTAINER"
SURFACE = "SURFACE"
CAN_OPEN = "CAN_OPEN"
HAS_SWITCH = "HAS_SWITCH"
HAS_PLUG = "HAS_PLUG"
SITTABLE = "SITTABLE"
CLEANER = "CLEANER"
CAPABILITIES = (GRABBABLE, CONTAINER, SURFACE, CAN_OPEN, HAS_SWITCH, HAS_PLUG,
                SITTABLE, CLEANER)

# relations
INSIDE, ON_TOP, CLOSE, HOLDS = "INSIDE", "ON_TOP", "CLOSE", "HOLDS"
RELATIONS = (INSIDE, ON_TOP, CLOSE, HOLDS)

MAX_SCENE_IDS = 64
MAX_HELD = 2

ROOM_ARCHETYPES = ("kitchen", "livingroom", "bedroom", "bathroom",
                   "home_office", "dining_room")


@dataclass(frozen=True)
class Archetype:
    name: str
    caps: FrozenSet[str]
    rooms: Tuple[str, ...]          # rooms this archetype may appear in
    dirtyable: bool = False


def _arch(name, caps, rooms, dirtyable=False):
    return Archetype(name, frozenset(caps), tuple(rooms), dirtyable)


OBJECT_CATALOG: Dict[str, Archetype] = {a.name: a for a in [
    # kitchen
    _arch("fridge", [CONTAINER, CAN_OPEN], ["kitchen"]),
    _arch("cupboard", [CONTAINER, CAN_OPEN], ["kitchen", "dining_room"]),
    _arch("sink", [CONTAINER, CLEANER], ["kitchen", "bathroom"]),
    _arch("stove", [HAS_SWITCH], ["kitchen"]),
    _arch("microwave", [CONTAINER, CAN_OPEN, HAS_SWITCH, HAS_PLUG], ["kitchen"]),
    _arch("coffee_maker", [HAS_SWITCH, HAS_PLUG], ["kitchen"]),
    _arch("table", [SURFACE], ["kitchen", "livingroom", "dining_room", "home_office"]),
    _arch("plate", [GRABBABLE], ["kitchen", "dining_room"], dirtyable=True),
    _arch("cup", [GRABBABLE], ["kitchen", "livingroom", "dining_room"], dirtyable=True),
    _arch("glass", [GRABBABLE], ["kitchen", "dining_room"], dirtyable=True),
    _arch("bowl", [GRABBABLE], ["kitchen", "dining_room"], dirtyable=True),
    _arch("fork", [GRABBABLE], ["kitchen", "dining_room"], dirtyable=True),
    _arch("pan", [GRABBABLE], ["kitchen"], dirtyable=True),
    # livingroom
    _arch("sofa", [SITTABLE], ["livingroom"]),
    _arch("coffee_table", [SURFACE], ["livingroom"]),
    _arch("tv", [HAS_SWITCH, HAS_PLUG], ["livingroom", "bedroom"]),
    _arch("remote_control", [GRABBABLE], ["livingroom", "bedroom"]),
    _arch("bookshelf", [SURFACE], ["livingroom", "home_office"]),
    _arch("book", [GRABBABLE], ["livingroom", "bedroom", "home_office"]),
    _arch("magazine", [GRABBABLE], ["livingroom"]),
    _arch("toy", [GRABBABLE], ["livingroom", "bedroom"]),
    _arch("lamp", [HAS_SWITCH, HAS_PLUG], ["livingroom", "bedroom", "home_office"]),
    _arch("chair", [SITTABLE], ["kitchen", "dining_room", "home_office", "livingroom"]),
    # bedroom
    _arch("bed", [SITTABLE], ["bedroom"]),
    _arch("night_stand", [SURFACE], ["bedroom"]),
    _arch("wardrobe", [CONTAINER, CAN_OPEN], ["bedroom"]),
    _arch("pillow", [GRABBABLE], ["bedroom", "livingroom"]),
    _arch("alarm_clock", [GRABBABLE], ["bedroom"]),
    _arch("phone", [GRABBABLE], ["bedroom", "livingroom", "home_office"]),
    # bathroom
    _arch("bathroom_cabinet", [CONTAINER, CAN_OPEN], ["bathroom"]),
    _arch("towel", [GRABBABLE], ["bathroom"]),
    _arch("soap", [GRABBABLE], ["bathroom"]),
    _arch("washing_machine", [CONTAINER, CAN_OPEN, HAS_SWITCH, HAS_PLUG], ["bathroom"]),
    _arch("rag", [GRABBABLE], ["bathroom", "kitchen"], dirtyable=True),
    # home office
    _arch("desk", [SURFACE], ["home_office"]),
    _arch("computer", [HAS_SWITCH, HAS_PLUG], ["home_office"]),
    _arch("printer", [HAS_SWITCH, HAS_PLUG], ["home_office"]),
    _arch("laptop", [GRABBABLE, HAS_SWITCH, HAS_PLUG], ["home_office", "livingroom"]),
    _arch("drawer", [CONTAINER, CAN_OPEN], ["home_office", "bedroom"]),
    _arch("folder", [GRABBABLE], ["home_office"]),
    _arch("pen", [GRABBABLE], ["home_office"]),
    # dining room
    _arch("cabinet", [CONTAINER, CAN_OPEN], ["dining_room", "livingroom"]),
    _arch("candle", [GRABBABLE], ["dining_room"]),
    _arch("napkin", [GRABBABLE], ["dining_room"]),
]}

# anchor furniture guaranteed per room so templates usually instantiate
_ROOM_ANCHORS = {
    "kitchen": ["sink", "fridge", "cupboard", "table", "stove"],
    "livingroom": ["sofa", "coffee_table", "tv"],
    "bedroom": ["bed", "wardrobe", "night_stand"],
    "bathroom": ["bathroom_cabinet", "washing_machine", "sink"],
    "home_office": ["desk", "computer", "drawer"],
    "dining_room": ["table", "cabinet", "chair"],
}


@dataclass
class Room:
    oid: int
    archetype: str


@dataclass
class ObjectNode:
    oid: int
    archetype: str
    states: Set[str] = field(default_factory=set)
    caps: FrozenSet[str] = frozenset()
    home: Optional[Tuple[str, int]] = None    # (relation, target id) at creation


@dataclass
class SceneGraph:
    scene_id: str
    rooms: List[Room]
    objects: Dict[int, ObjectNode]
    relations: Set[Tuple[int, str, int]]
    character_id: int
    character_states: Set[str] = field(default_factory=set)

    # -- indexing -----------------------------------------------------------

    def room_ids(self) -> Set[int]:
        return {r.oid for r in self.rooms}

    def node_name(self, oid: int) -> str:
        if oid == self.character_id:
            return "character"
        for r in self.rooms:
            if r.oid == oid:
                return r.archetype
        if oid in self.objects:
            return self.objects[oid].archetype
        return f"unknown_{oid}"

    def placement_of(self, oid: int) -> Optional[Tuple[str, int]]:
        """The INSIDE/ON_TOP/HOLDS edge locating this node, if any.

        Objects carry exactly one such edge; the character may carry INSIDE
        (its room) plus ON_TOP (a seat), so INSIDE wins deterministically."""
        candidates = []
        for (s, rel, o) in self.relations:
            if s == oid and rel in (INSIDE, ON_TOP):
                candidates.append((0 if rel == INSIDE else 1, rel, o))
            if o == oid and rel == HOLDS:
                candidates.append((2, HOLDS, s))
        if not candidates:
            return None
        candidates.sort()
        return (candidates[0][1], candidates[0][2])

    def room_of(self, oid: int) -> Optional[int]:
        seen = set()
        cur = oid
        while cur not in seen:
            seen.add(cur)
            if cur in self.room_ids():
                return cur
            place = self.placement_of(cur)
            if place is None:
                return None
            cur = place[1]
        return None

    def held_ids(self) -> List[int]:
        return sorted(o for (s, rel, o) in self.relations
                      if rel == HOLDS and s == self.character_id)

    def close_ids(self) -> Set[int]:
        return {o for (s, rel, o) in self.relations
                if rel == CLOSE and s == self.character_id}

    def children_of(self, oid: int) -> List[int]:
        return sorted(s for (s, rel, o) in self.relations
                      if o == oid and rel in (INSIDE, ON_TOP))

    def ancestors_of(self, oid: int) -> List[int]:
        out = []
        cur = oid
        for _ in range(len(self.objects) + len(self.rooms) + 2):
            place = self.placement_of(cur)
            if place is None or place[0] == HOLDS:
                break
            cur = place[1]
            out.append(cur)
            if cur in self.room_ids():
                break
        return out

    def clone(self) -> "SceneGraph":
        return copy.deepcopy(self)

    # -- invariants ----------------------------------------------------------

    def validate(self) -> None:
        ids = {self.character_id} | self.room_ids() | set(self.objects)
        if len(ids) != 1 + len(self.rooms) + len(self.objects):
            raise ValueError("scene ids are not unique")
        if max(ids) >= MAX_SCENE_IDS or min(ids) < 1:
            raise ValueError(f"scene ids must lie in [1, {MAX_SCENE_IDS})")
        for (s, rel, o) in self.relations:
            if rel not in RELATIONS:
                raise ValueError(f"unknown relation {rel}")
            if s not in ids or o not in ids:
                raise ValueError(f"relation ({s}, {rel}, {o}) references unknown id")
            if rel == HOLDS and s != self.character_id:
                raise ValueError("only the character can hold objects")
        if len(self.held_ids()) > MAX_HELD:
            raise ValueError(f"character holds more than {MAX_HELD} objects")
        for oid, obj in self.objects.items():
            room = self.room_of(oid)
            if room is None:
                raise ValueError(f"object {oid} ({obj.archetype}) is not in any room")
            if CAN_OPEN in obj.caps and len(obj.states & {OPEN, CLOSED}) != 1:
                raise ValueError(f"object {oid} must be exactly one of OPEN/CLOSED")
            if HAS_SWITCH in obj.caps and len(obj.states & {ON, OFF}) != 1:
                raise ValueError(f"object {oid} must be exactly one of ON/OFF")
            if HAS_PLUG in obj.caps and len(obj.states & {PLUGGED_IN, PLUGGED_OUT}) != 1:
                raise ValueError(f"object {oid} must be exactly one of PLUGGED_IN/OUT")
        if self.room_of(self.character_id) is None:
            raise ValueError("character is not in any room")


# ---------------------------------------------------------------------------
# generation


SIZE_CLASSES = {"small": (15, 26), "medium": (24, 38), "large": (34, 52)}


def generate_scene(seed: int, size: str = "small", scene_id: Optional[str] = None) -> SceneGraph:
    """Procedurally generate a valid scene. The kitchen is always present;
    other rooms are sampled. Node ids (character + rooms + objects) stay
    below 64 so token id buckets are collision-free."""
    if size not in SIZE_CLASSES:
        raise ValueError(f"unknown size class {size!r}")
    rng = np.random.default_rng(seed)
    n_rooms = int(rng.integers(3, 7))
    others = [r for r in ROOM_ARCHETYPES if r != "kitchen"]
    rng.shuffle(others)
    room_names = ["kitchen"] + others[:n_rooms - 1]

    lo, hi = SIZE_CLASSES[size]
    n_objects = int(rng.integers(lo, hi + 1))
    anchor_total = sum(len(_ROOM_ANCHORS[r]) for r in room_names)
    n_objects = max(n_objects, anchor_total + 6)
    n_objects = min(n_objects, MAX_SCENE_IDS - 2 - n_rooms)

    next_id = 1
    character_id = next_id
    next_id += 1
    rooms = []
    for name in room_names:
        rooms.append(Room(next_id, name))
        next_id += 1
    room_by_name = {r.archetype: r.oid for r in rooms}

    objects: Dict[int, ObjectNode] = {}
    relations: Set[Tuple[int, str, int]] = set()

    def add_object(arch: Archetype, room_oid: int) -> int:
        nonlocal next_id
        oid = next_id
        next_id += 1
        states: Set[str] = set()
        if CAN_OPEN in arch.caps:
            states.add(CLOSED if rng.random() < 0.8 else OPEN)
        if HAS_SWITCH in arch.caps:
            states.add(OFF if rng.random() < 0.75 else ON)
        if HAS_PLUG in arch.caps:
            states.add(PLUGGED_IN if rng.random() < 0.6 else PLUGGED_OUT)
        if arch.dirtyable:
            states.add(DIRTY if rng.random() < 0.4 else CLEAN)
        node = ObjectNode(oid, arch.name, states, arch.caps)
        objects[oid] = node
        # placement: grabbables may sit on surfaces or inside containers
        placed = False
        if GRABBABLE in arch.caps:
            roll = rng.random()
            in_room = [objects[i] for i in sorted(objects)
                       if _in_room(i, room_oid) and i != oid]
            if roll < 0.45:
                surfaces = [o for o in in_room if SURFACE in o.caps]
                if surfaces:
                    target = surfaces[int(rng.integers(len(surfaces)))]
                    relations.add((oid, ON_TOP, target.oid))
                    placed = True
            elif roll < 0.70:
                containers = [o for o in in_room if CONTAINER in o.caps and CLEANER not in o.caps]
                if containers:
                    target = containers[int(rng.integers(len(containers)))]
                    relations.add((oid, INSIDE, target.oid))
                    placed = True
        if not placed:
            relations.add((oid, INSIDE, room_oid))
        node.home = _placement(relations, oid)
        return oid

    def _in_room(oid: int, room_oid: int) -> bool:
        cur = oid
        for _ in range(64):
            hit = [o for (s, rel, o) in relations if s == cur and rel in (INSIDE, ON_TOP)]
            if not hit:
                return False
            cur = hit[0]
            if cur == room_oid:
                return True
            if cur in room_by_name.values():
                return False
        return False

    def _placement(rels, oid):
        for (s, rel, o) in rels:
            if s == oid and rel in (INSIDE, ON_TOP):
                return (rel, o)
        return None

    # anchors first, then random filler up to the object budget
    for room in rooms:
        for arch_name in _ROOM_ANCHORS[room.archetype]:
            if len(objects) >= n_objects:
                break
            add_object(OBJECT_CATALOG[arch_name], room.oid)

    fillable = sorted(OBJECT_CATALOG)
    grab_fill = [n for n in fillable if GRABBABLE in OBJECT_CATALOG[n].caps]
    dirty_fill = [n for n in grab_fill if OBJECT_CATALOG[n].dirtyable]

    def fill_from(pool) -> None:
        arch = OBJECT_CATALOG[pool[int(rng.integers(len(pool)))]]
        rooms_ok = [room_by_name[r] for r in arch.rooms if r in room_by_name]
        if rooms_ok:
            add_object(arch, rooms_ok[int(rng.integers(len(rooms_ok)))])

    # guarantee washable items, then bias filler toward portables so every
    # scene affords pick-and-place tasks
    for _ in range(50):
        if sum(1 for o in objects.values()
               if OBJECT_CATALOG[o.archetype].dirtyable) >= 2:
            break
        fill_from(dirty_fill)
    for _ in range(200):
        if len(objects) >= n_objects:
            break
        fill_from(grab_fill if rng.random() < 0.7 else fillable)

    # at least two things genuinely need washing
    dirtyables = sorted(i for i, o in objects.items()
                        if OBJECT_CATALOG[o.archetype].dirtyable)
    n_dirty = sum(1 for i in dirtyables if DIRTY in objects[i].states)
    for i in dirtyables:
        if n_dirty >= 2:
            break
        if DIRTY not in objects[i].states:
            objects[i].states.discard(CLEAN)
            objects[i].states.add(DIRTY)
            n_dirty += 1

    start_room = rooms[int(rng.integers(len(rooms)))]
    relations.add((character_id, INSIDE, start_room.oid))

    scene = SceneGraph(
        scene_id=scene_id or f"scene_{seed}",
        rooms=rooms,
        objects=objects,
        relations=relations,
        character_id=character_id,
    )
    scene.validate()
    return scene


# ---------------------------------------------------------------------------
# serialization


def scene_to_json(scene: SceneGraph) -> dict:
    return {
        "scene_id": scene.scene_id,
        "character_id": scene.character_id,
        "character_states": sorted(scene.character_states),
        "rooms": [{"id": r.oid, "archetype": r.archetype} for r in scene.rooms],
        "objects": [
            {
                "id": o.oid,
                "archetype": o.archetype,
                "states": sorted(o.states),
                "caps": sorted(o.caps),
                "home": list(o.home) if o.home else None,
            }
            for _, o in sorted(scene.objects.items())
        ],
        "relations": sorted([list(r) for r in scene.relations]),
    }


def scene_from_json(data: dict) -> SceneGraph:
    scene = SceneGraph(
        scene_id=data["scene_id"],
        rooms=[Room(r["id"], r["archetype"]) for r in data["rooms"]],
        objects={
            o["id"]: ObjectNode(
                o["id"], o["archetype"], set(o["states"]), frozenset(o["caps"]),
                tuple(o["home"]) if o["home"] else None)
            for o in data["objects"]
        },
        relations={(s, rel, o) for s, rel, o in (tuple(r) for r in data["relations"])},
        character_id=data["character_id"],
        character_states=set(data.get("character_states", [])),
    )
    scene.validate()
    return scene
