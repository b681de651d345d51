"""Persona sampling from attribute catalogs and per-split cross-product dialogue specs."""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .util import ConvoforgeError, derive_seed

ROLES = ("doctor", "patient")
SPLITS = ("train", "dev", "test")

SHARED_ATTRIBUTES = (
    "age", "height", "weight", "race", "gender",
    "forgetfulness", "formality", "hurriedness", "marital_status",
)
PATIENT_ATTRIBUTES = ("english_fluency", "occupation", "insurance")
DOCTOR_ATTRIBUTES = ("years_experience",)
NUMERIC_ATTRIBUTES = ("age", "height", "weight", "years_experience")


class CatalogError(ConvoforgeError):
    pass


class PlanError(ConvoforgeError):
    pass


@dataclass(frozen=True)
class Persona:
    id: str
    role: str
    split: str
    name: str
    age: int
    height: int
    weight: int
    race: str
    gender: str
    forgetfulness: str
    formality: str
    hurriedness: str
    marital_status: str
    english_fluency: str | None = None
    occupation: str | None = None
    insurance: str | None = None
    reason_for_visit: str | None = None
    years_experience: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise PlanError(f"unknown role {self.role!r}")
        patient_only = (self.english_fluency, self.occupation, self.insurance, self.reason_for_visit)
        if self.role == "patient":
            if any(v is None for v in patient_only) or self.years_experience is not None:
                raise PlanError(f"patient {self.id} must carry exactly the patient-specific fields")
        else:
            if any(v is not None for v in patient_only) or self.years_experience is None:
                raise PlanError(f"doctor {self.id} must carry exactly the doctor-specific fields")

    def to_dict(self) -> dict[str, Any]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Persona":
        return cls(**d)

    def describe(self) -> str:
        """Attribute list as fed to the turn prompt."""
        lines = []
        for k, v in self.to_dict().items():
            if k in ("id", "role", "split"):
                continue
            lines.append(f"- {k.replace('_', ' ')}: {v}{_UNITS.get(k, '')}")
        return "\n".join(lines)


_UNITS = {"height": " cm", "weight": " kg", "age": " years", "years_experience": " years"}


@dataclass
class AttributeCatalog:
    """Per-attribute value lists (or integer ranges), name lists and the complaint list."""

    values: dict[str, list[Any]]
    ranges: dict[str, tuple[int, int]]
    first_names: list[str]
    last_names: list[str]
    complaints: list[str]
    weights: dict[str, list[float]] = field(default_factory=dict)
    role_ranges: dict[str, dict[str, tuple[int, int]]] = field(default_factory=dict)
    names_by_gender: dict[str, list[str]] = field(default_factory=dict)
    correlated_names: bool = False

    @property
    def complaint_count(self) -> int:
        return len(self.complaints)

    def validate(self) -> None:
        for attr in SHARED_ATTRIBUTES + PATIENT_ATTRIBUTES + DOCTOR_ATTRIBUTES:
            if attr in NUMERIC_ATTRIBUTES:
                if attr not in self.ranges:
                    raise CatalogError(f"missing attribute: {attr}")
                lo, hi = self.ranges[attr]
                if lo > hi:
                    raise CatalogError(f"empty attribute: {attr}")
            else:
                if attr not in self.values:
                    raise CatalogError(f"missing attribute: {attr}")
                if not self.values[attr]:
                    raise CatalogError(f"empty attribute: {attr}")
        if not self.first_names:
            raise CatalogError("empty attribute: first_names")
        if not self.last_names:
            raise CatalogError("empty attribute: last_names")
        if not self.complaints:
            raise CatalogError("empty attribute: complaints")
        seen: set[str] = set()
        for c in self.complaints:
            if c in seen:
                raise CatalogError(f"duplicate complaint: {c!r}")
            seen.add(c)
        for attr, w in self.weights.items():
            if attr not in self.values or len(w) != len(self.values[attr]):
                raise CatalogError(f"weights for {attr!r} do not match its value list")
            if any(x < 0 for x in w) or sum(w) <= 0:
                raise CatalogError(f"weights for {attr!r} must be non-negative with positive sum")
        if self.correlated_names:
            for g in self.values["gender"]:
                if not self.names_by_gender.get(g):
                    raise CatalogError(f"correlated names requested but no names for gender {g!r}")

    def range_for(self, attr: str, role: str) -> tuple[int, int]:
        return self.role_ranges.get(role, {}).get(attr, self.ranges[attr])


def _read_complaints(raw: Any, base: Path) -> list[str]:
    if isinstance(raw, str):
        path = base / raw
        if not path.exists():
            raise CatalogError(f"complaint list not found: {path}")
        return [line.strip() for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip() and not line.lstrip().startswith("#")]
    if isinstance(raw, list):
        return [str(c).strip() for c in raw]
    raise CatalogError("missing attribute: complaints")


def load_catalog(path: str | Path | None = None) -> AttributeCatalog:
    """Load a YAML catalog; ``None`` loads the bundled default."""
    if path is None:
        path = Path(str(files("convoforge.data").joinpath("catalog.yaml")))
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise CatalogError(f"cannot read catalog {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CatalogError(f"catalog {path} is not a mapping")
    attrs = doc.get("attributes") or {}
    values: dict[str, list[Any]] = {}
    ranges: dict[str, tuple[int, int]] = {}
    for name, spec in attrs.items():
        if isinstance(spec, dict) and "range" in spec:
            lo, hi = spec["range"]
            ranges[name] = (int(lo), int(hi))
        elif isinstance(spec, list):
            values[name] = [str(v) for v in spec]
        elif spec is None:
            values[name] = []
        else:
            raise CatalogError(f"attribute {name!r}: expected a list or a {{range: [lo, hi]}} mapping")
    role_ranges = {}
    for role, overrides in (doc.get("role_overrides") or {}).items():
        role_ranges[role] = {k: tuple(int(x) for x in v["range"]) for k, v in overrides.items()}
    names = doc.get("names") or {}
    catalog = AttributeCatalog(
        values=values,
        ranges=ranges,
        first_names=[str(n) for n in names.get("first") or []],
        last_names=[str(n) for n in names.get("last") or []],
        complaints=_read_complaints(doc.get("complaints"), path.parent),
        weights={k: [float(x) for x in v] for k, v in (doc.get("weights") or {}).items()},
        role_ranges=role_ranges,
        names_by_gender={k: list(v) for k, v in (names.get("by_gender") or {}).items()},
        correlated_names=bool(names.get("correlated", False)),
    )
    catalog.validate()
    return catalog


@dataclass(frozen=True)
class SplitPlan:
    counts: Mapping[str, tuple[int, int]]  # split -> (doctors, patients)
    seed: int = 0

    def __post_init__(self):
        for split, (d, p) in self.counts.items():
            if d < 0 or p < 0:
                raise PlanError(f"negative persona count in split {split!r}")

    @classmethod
    def standard(cls, seed: int = 0) -> "SplitPlan":
        return cls({"train": (60, 120), "dev": (20, 20), "test": (20, 60)}, seed)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SplitPlan":
        counts = {k: (int(v[0]), int(v[1])) for k, v in d["counts"].items()}
        return cls(counts, int(d.get("seed", 0)))

    def to_dict(self) -> dict:
        return {"counts": {k: list(v) for k, v in self.counts.items()}, "seed": self.seed}

    def total_dialogues(self) -> int:
        return sum(d * p for d, p in self.counts.values())


def _pick(rng: random.Random, catalog: AttributeCatalog, attr: str) -> str:
    options = catalog.values[attr]
    w = catalog.weights.get(attr)
    return rng.choices(options, weights=w)[0] if w else rng.choice(options)


def sample_persona(catalog: AttributeCatalog, role: str, split: str, index: int, seed: int) -> Persona:
    rng = random.Random(derive_seed("persona", seed, split, role, index))
    prefix = "doc" if role == "doctor" else "pat"
    fields: dict[str, Any] = {"id": f"{split}-{prefix}-{index:03d}", "role": role, "split": split}
    for attr in SHARED_ATTRIBUTES:
        if attr in NUMERIC_ATTRIBUTES:
            fields[attr] = rng.randint(*catalog.range_for(attr, role))
        else:
            fields[attr] = _pick(rng, catalog, attr)
    if catalog.correlated_names:
        first = rng.choice(catalog.names_by_gender[fields["gender"]])
    else:
        first = rng.choice(catalog.first_names)
    fields["name"] = f"{first} {rng.choice(catalog.last_names)}"
    if role == "patient":
        for attr in PATIENT_ATTRIBUTES:
            fields[attr] = _pick(rng, catalog, attr)
        fields["reason_for_visit"] = rng.choice(catalog.complaints)
    else:
        lo, hi = catalog.range_for("years_experience", role)
        # keep experience compatible with age (medical school ends around 25)
        hi = max(lo, min(hi, fields["age"] - 25))
        fields["years_experience"] = rng.randint(lo, hi)
    return Persona(**fields)


def sample_personas(catalog: AttributeCatalog, plan: SplitPlan) -> dict[str, list[Persona]]:
    """Doctors then patients per split, each persona a pure function of (catalog, seed, split, role, index)."""
    out: dict[str, list[Persona]] = {}
    for split, (n_doc, n_pat) in plan.counts.items():
        people = [sample_persona(catalog, "doctor", split, i, plan.seed) for i in range(n_doc)]
        people += [sample_persona(catalog, "patient", split, i, plan.seed) for i in range(n_pat)]
        out[split] = people
    return out


@dataclass(frozen=True)
class DialogueSpec:
    id: str
    doctor_id: str
    patient_id: str
    split: str
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DialogueSpec":
        return cls(**d)


def cross_product_specs(doctors: Sequence[Persona], patients: Sequence[Persona], split: str,
                        seed: int) -> list[DialogueSpec]:
    for p in list(doctors) + list(patients):
        if p.split != split:
            raise PlanError(f"persona {p.id} belongs to split {p.split!r}, not {split!r}")
    for p in doctors:
        if p.role != "doctor":
            raise PlanError(f"persona {p.id} is not a doctor")
    for p in patients:
        if p.role != "patient":
            raise PlanError(f"persona {p.id} is not a patient")
    specs = []
    for doc in doctors:
        for pat in patients:
            k = len(specs)
            specs.append(DialogueSpec(
                id=f"{split}-{k:05d}",
                doctor_id=doc.id,
                patient_id=pat.id,
                split=split,
                seed=derive_seed("dialogue", seed, doc.id, pat.id),
            ))
    return specs


def split_specs(personas: Mapping[str, Sequence[Persona]], seed: int) -> dict[str, list[DialogueSpec]]:
    out = {}
    for split, people in personas.items():
        docs = [p for p in people if p.role == "doctor"]
        pats = [p for p in people if p.role == "patient"]
        out[split] = cross_product_specs(docs, pats, split, seed)
    return out


def check_disjoint(personas: Iterable[Persona]) -> list[str]:
    """Persona ids that appear in more than one split."""
    where: dict[str, set[str]] = {}
    for p in personas:
        where.setdefault(p.id, set()).add(p.split)
    return sorted(pid for pid, splits in where.items() if len(splits) > 1)
