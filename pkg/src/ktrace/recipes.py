"""Named feature recipes for the standard logistic-regression models.

Each name maps to an exact ordered family list:

* irt       - bias, student and question one-hots (ability minus difficulty).
* pfa       - bias, KC one-hots plus per-KC correct/attempt counts.
* das3h     - irt plus KC one-hots and KC-level time-window counts.
* best-lr   - irt plus KC one-hots, total counts and per-KC counts.
* best-lr+  - best-lr plus time-window counts at all three scopes,
              the smoothed average correctness and the response pattern.
* augmented-lr - best-lr plus every log-dependent family the dataset
              manifest supports, drawn from a fixed candidate list.

Resolution never mutates anything and fails before training when a
requested family is not supported by the dataset manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

from ktrace.core import ConfigError, DatasetManifest
from ktrace.features import F, FeatureFamily, Recipe


class ResolutionError(ConfigError):
    """A recipe cannot be built for the given dataset manifest."""


RECIPE_NAMES: tuple[str, ...] = (
    "irt",
    "pfa",
    "das3h",
    "best-lr",
    "best-lr+",
    "augmented-lr",
)

# Families augmented-lr adds on top of best-lr when the manifest allows
# them.  Current elapsed time is deliberately absent: it is not known
# until the response has been given, so recipes used for model
# comparison never include it.
AUGMENTED_CANDIDATES: tuple[FeatureFamily, ...] = (
    F("tw_counts", "total"),
    F("tw_counts", "kc"),
    F("tw_counts", "question"),
    F("lag_time", "current"),
    F("elapsed_time", "prior"),
    F("datetime", "hour"),
    F("study_module"),
    F("context", "topic"),
    F("context", "teacher_group"),
    F("context", "bundle"),
    F("part_area_counts"),
    F("prereq_counts"),
    F("postreq_counts"),
    F("video_watched_counts"),
    F("reading_counts"),
    F("hint_counts"),
    F("smoothed_avg_correct"),
    F("response_pattern"),
)

_IRT = (F("bias"), F("student"), F("question"))
_BEST_LR = _IRT + (F("kc"), F("counts", "total"), F("counts", "kc"))

_FIXED: dict[str, tuple[FeatureFamily, ...]] = {
    "irt": _IRT,
    "pfa": (F("bias"), F("kc"), F("counts", "kc")),
    "das3h": _IRT + (F("kc"), F("tw_counts", "kc")),
    "best-lr": _BEST_LR,
    "best-lr+": _BEST_LR
    + (
        F("tw_counts", "total"),
        F("tw_counts", "kc"),
        F("tw_counts", "question"),
        F("smoothed_avg_correct"),
        F("response_pattern"),
    ),
}


@dataclass(frozen=True)
class NamedRecipe:
    name: str
    recipe: Recipe


def resolve(
    name: str,
    manifest: DatasetManifest,
    extras: tuple[FeatureFamily, ...] | None = None,
) -> NamedRecipe:
    """Build the recipe for a model name against a dataset manifest.

    For "augmented-lr" the default candidate list is intersected with
    the manifest's capabilities, so unsupported families are silently
    omitted.  An explicit `extras` tuple (appended to the named family
    list for any model) is strict instead: unsupported entries raise a
    ResolutionError naming the gap.
    """
    key = name.strip().lower()
    if key not in RECIPE_NAMES:
        raise ResolutionError(
            f"unknown recipe {name!r}; expected one of {', '.join(RECIPE_NAMES)}"
        )
    if key == "augmented-lr":
        families = list(_BEST_LR)
        for fam in AUGMENTED_CANDIDATES:
            if fam.allowed_by(manifest) and fam not in families:
                families.append(fam)
    else:
        families = list(_FIXED[key])
        unsupported = [f.name for f in families if not f.allowed_by(manifest)]
        if unsupported:
            raise ResolutionError(
                f"recipe {name!r} needs families unsupported by dataset "
                f"{manifest.name!r}: {', '.join(unsupported)}"
            )
    if extras:
        gaps = [f.name for f in extras if not f.allowed_by(manifest)]
        if gaps:
            raise ResolutionError(
                f"extra families unsupported by dataset {manifest.name!r}: {', '.join(gaps)}"
            )
        for fam in extras:
            if fam not in families:
                families.append(fam)
    return NamedRecipe(name=key, recipe=Recipe(families=tuple(families)))
