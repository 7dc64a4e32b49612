"""Capability fabric: Arts fill layer slots, Cultures compose them, Machines run them.

An Art is the smallest registered capability unit. A Culture assigns exactly
one Art to each of the five layer slots. A Machine is a per-node instance of a
Culture; the union of op codes over its Arts is the only set of operations the
machine will ever accept.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import MachineId

LAYERS = ("PHYSICAL", "MAC", "ROUTING", "TRANSPORT", "APPLICATION")
NEED_TAGS = ("ENERGY", "PRIVACY", "SECURITY", "NONE")


class FabricError(Exception):
    pass


class DuplicateArt(FabricError):
    pass


class DuplicateCulture(FabricError):
    pass


class UnknownArt(FabricError):
    pass


class UnknownCulture(FabricError):
    pass


class MissingSlot(FabricError):
    pass


class LayerMismatch(FabricError):
    pass


class DuplicatePending(FabricError):
    pass


@dataclass(frozen=True)
class ArtDef:
    """A registered capability unit sitting in one layer slot.

    Non-application arts contribute behavior through ``params`` (per-hop
    delay, loss probability, contention bound, window, retransmit limit);
    application arts declare the op codes their machines accept. ``need_tag``
    is informational metadata only and drives no behavior.
    """

    name: str
    layer: str
    op_codes: frozenset = frozenset()
    params: dict = field(default_factory=dict)
    need_tag: str | None = None

    def __post_init__(self):
        if self.layer not in LAYERS:
            raise FabricError(f"unknown layer {self.layer!r} for art {self.name!r}")
        if self.need_tag is not None and self.need_tag not in NEED_TAGS:
            raise FabricError(f"unknown need tag {self.need_tag!r}")
        if self.layer == "APPLICATION" and not self.op_codes:
            raise FabricError(f"application art {self.name!r} declares no op codes")


@dataclass(frozen=True)
class CultureDef:
    """A service blueprint: one art name per layer slot.

    ``requires`` lists node attribute names (for example ``gateway``) that
    must be truthy on a node before it may start this service.
    """

    name: str
    slots: dict  # layer -> art name
    requires: tuple = ()


@dataclass
class MachineInstance:
    """A running instance of a Culture on one node.

    ``accepted_ops`` is derived from the culture's arts, never hand-set, and
    ``cid`` is assigned exactly once when the machine joins a community.
    """

    mid: MachineId
    culture: str
    node: str
    accepted_ops: frozenset
    cid: str | None = None
    state: dict = field(default_factory=dict)

    def join(self, cid: str) -> None:
        if self.cid is not None:
            raise FabricError(f"machine {self.mid} already joined {self.cid}")
        self.cid = cid


class ArtRegistry:
    """Name-keyed store of arts and cultures with referential integrity."""

    def __init__(self):
        self.arts: dict[str, ArtDef] = {}
        self.cultures: dict[str, CultureDef] = {}

    def register_art(self, art: ArtDef) -> None:
        if art.name in self.arts:
            raise DuplicateArt(art.name)
        self.arts[art.name] = art

    def register_culture(self, culture: CultureDef) -> None:
        if culture.name in self.cultures:
            raise DuplicateCulture(culture.name)
        for layer in LAYERS:
            if layer not in culture.slots:
                raise MissingSlot(f"culture {culture.name!r} misses slot {layer}")
        for layer, art_name in culture.slots.items():
            if layer not in LAYERS:
                raise FabricError(f"unknown slot {layer!r} in culture {culture.name!r}")
            art = self.arts.get(art_name)
            if art is None:
                raise UnknownArt(f"culture {culture.name!r} references {art_name!r}")
            if art.layer != layer:
                raise LayerMismatch(
                    f"culture {culture.name!r} puts {art_name!r} ({art.layer}) "
                    f"into slot {layer}"
                )
        self.cultures[culture.name] = culture

    def culture(self, name: str) -> CultureDef:
        try:
            return self.cultures[name]
        except KeyError:
            raise UnknownCulture(name) from None

    def art(self, name: str) -> ArtDef:
        try:
            return self.arts[name]
        except KeyError:
            raise UnknownArt(name) from None

    def culture_art(self, culture_name: str, layer: str) -> ArtDef:
        return self.art(self.culture(culture_name).slots[layer])

    def accepted_ops(self, culture_name: str) -> frozenset:
        """Union of op codes over the five arts of the culture."""
        culture = self.culture(culture_name)
        ops: set[str] = set()
        for layer in LAYERS:
            ops |= self.arts[culture.slots[layer]].op_codes
        return frozenset(ops)

    def instantiate(self, culture_name: str, node_label: str, ordinal: int) -> MachineInstance:
        """Build a machine for ``culture_name`` hosted on ``node_label``.

        Ordinal assignment (sequential per node) and the pending-duplicate
        check belong to the node that hosts the machine.
        """
        return MachineInstance(
            mid=MachineId(node_label, ordinal),
            culture=culture_name,
            node=node_label,
            accepted_ops=self.accepted_ops(culture_name),
        )


def accepts(machine: MachineInstance, op_code: str) -> bool:
    """True iff the machine's culture declares ``op_code``. Pure, no state change."""
    return op_code in machine.accepted_ops
