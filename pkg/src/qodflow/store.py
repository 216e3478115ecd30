"""In-memory columnar key-value store with one-version-deep previous state.

Containers hold numeric elements keyed by string. Every element remembers the
value it had at the last snapshot point, so change metrics can be computed
without replaying write logs. Writes are observable through registered
listeners, which is how the engine mirrors updates into its per-step views.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Tuple


class StoreError(Exception):
    pass


class ContainerNotFoundError(StoreError, KeyError):
    def __init__(self, name: str):
        super().__init__(f"container not found: {name!r}")
        self.name = name


class KeyNotFoundError(StoreError, KeyError):
    def __init__(self, container: str, key: str):
        super().__init__(f"key not found: {key!r} in container {container!r}")
        self.container = container
        self.key = key


# Listener receives (container name, key, old current value, new value).
# A fresh insert reports an old value of 0.0: insertion counts as a change
# from zero.
UpdateListener = Callable[[str, str, float, float], None]


@dataclass
class Element:
    """One numeric cell: current value plus the value at the last snapshot."""

    key: str
    current: float
    previous: float = 0.0
    dirty: bool = True


class Container:
    """Flat named collection of elements with dirty tracking.

    ``n`` counts all elements, ``m`` the ones written since the last
    snapshot. ``snapshot()`` promotes every current value to previous and
    clears dirty flags, establishing a new reference state.
    """

    def __init__(self, name: str):
        self.name = name
        self.elements: Dict[str, Element] = {}
        self._dirty = 0

    @property
    def n(self) -> int:
        return len(self.elements)

    @property
    def m(self) -> int:
        return self._dirty

    def put(self, key: str, value: float) -> float:
        """Write a value, marking the element dirty. Returns the old current."""
        el = self.elements.get(key)
        if el is None:
            self.elements[key] = Element(key=key, current=float(value))
            self._dirty += 1
            return 0.0
        old = el.current
        el.current = float(value)
        if not el.dirty:
            el.dirty = True
            self._dirty += 1
        return old

    def get(self, key: str) -> float:
        el = self.elements.get(key)
        if el is None:
            raise KeyNotFoundError(self.name, key)
        return el.current

    def get_or(self, key: str, default: float = 0.0) -> float:
        el = self.elements.get(key)
        return default if el is None else el.current

    def __contains__(self, key: str) -> bool:
        return key in self.elements

    def snapshot(self) -> None:
        for el in self.elements.values():
            el.previous = el.current
            el.dirty = False
        self._dirty = 0

    def items(self) -> Iterator[Element]:
        return iter(self.elements.values())

    def dirty_items(self) -> Iterator[Element]:
        return (el for el in self.elements.values() if el.dirty)

    def keys(self) -> List[str]:
        return list(self.elements.keys())

    def dump(self) -> Dict[str, Tuple[float, float, bool]]:
        return {k: (e.current, e.previous, e.dirty) for k, e in self.elements.items()}

    def restore(self, state: Dict[str, Tuple[float, float, bool]]) -> None:
        self.elements = {
            k: Element(key=k, current=c, previous=p, dirty=d)
            for k, (c, p, d) in state.items()
        }
        self._dirty = sum(1 for c, p, d in state.values() if d)


@dataclass
class Store:
    """Named containers plus update interception.

    Writes to a single container must be serialized by the caller; reads may
    be concurrent. Metric evaluation never runs concurrently with writes to
    the same container (the engine quiesces between wave phases).
    """

    containers: Dict[str, Container] = field(default_factory=dict)
    listeners: List[UpdateListener] = field(default_factory=list)

    def create_container(self, name: str) -> Container:
        if name in self.containers:
            raise ValueError(f"container already exists: {name!r}")
        c = Container(name)
        self.containers[name] = c
        return c

    def ensure_container(self, name: str) -> Container:
        return self.containers.get(name) or self.create_container(name)

    def container(self, name: str) -> Container:
        c = self.containers.get(name)
        if c is None:
            raise ContainerNotFoundError(name)
        return c

    def put(self, container: str, key: str, value: float) -> None:
        c = self.container(container)
        old = c.put(key, value)
        for listener in self.listeners:
            listener(container, key, old, float(value))

    def get(self, container: str, key: str) -> float:
        return self.container(container).get(key)

    def snapshot(self, container: str) -> None:
        self.container(container).snapshot()

    def register_listener(self, listener: UpdateListener) -> None:
        self.listeners.append(listener)

    def dump(self) -> Dict[str, Dict[str, Tuple[float, float, bool]]]:
        return {name: c.dump() for name, c in self.containers.items()}

    def restore(self, state: Dict[str, Dict[str, Tuple[float, float, bool]]]) -> None:
        for name, cstate in state.items():
            self.ensure_container(name).restore(cstate)
        for name in list(self.containers):
            if name not in state:
                del self.containers[name]
