"""Dataset manifests: one line-oriented text record per subject.

Schema (full grammar in docs/formats.md):

    subject <id>            opens a record
    role <train|id_test|ood>
    dataset_tag <tag>
    image_shape <e1> <e2> ...
    patch_size <e1> <e2> ...
    feature_tap <label>
    feature <patch_index> <path>
    logit <patch_index> <path>               optional
    sample <sample_index> <patch_index> <path>   optional
    ground_truth <path>                      optional
    end                     closes the record

Blank lines and '#' comments are ignored. Paths are relative to the
manifest's directory. Patch indices must form the dense range 0..N-1 of
the sliding-window grid implied by (image_shape, patch_size), and every
subject in one manifest must share the same feature_tap.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import IOFailure, ManifestError, MissingFile, MissingPatch, MixedTap
from .patches import make_grid

ROLES = ("train", "id_test", "ood")


@dataclass
class SubjectManifest:
    subject_id: str
    role: str
    dataset_tag: str
    image_shape: tuple[int, ...]
    patch_size: tuple[int, ...]
    feature_tap: str
    feature_files: list[tuple[int, Path]]
    logit_files: list[tuple[int, Path]] | None = None
    sample_prediction_files: list[tuple[int, int, Path]] | None = None
    ground_truth_path: Path | None = None

    @property
    def n_patches(self) -> int:
        return len(self.feature_files)


def _check_dense(indices, n_expected, subject_id, kind):
    seen = set()
    for i in indices:
        if i in seen:
            raise ManifestError(f"duplicate {kind} patch index {i}", subject_id)
        seen.add(i)
    for i in range(n_expected):
        if i not in seen:
            raise MissingPatch(subject_id, i)
    extra = seen - set(range(n_expected))
    if extra:
        raise ManifestError(
            f"{kind} patch index {min(extra)} outside grid of {n_expected} patches",
            subject_id,
        )


def _validate_subject(sub: SubjectManifest, manifest_dir: Path) -> None:
    if sub.role not in ROLES:
        raise ManifestError(f"unknown role '{sub.role}'", sub.subject_id)
    grid = make_grid(sub.image_shape, sub.patch_size)
    n = len(grid.origins)
    _check_dense([i for i, _ in sub.feature_files], n, sub.subject_id, "feature")
    if sub.logit_files is not None:
        _check_dense([i for i, _ in sub.logit_files], n, sub.subject_id, "logit")
    if sub.sample_prediction_files is not None:
        by_sample: dict[int, list[int]] = {}
        for s, p, _ in sub.sample_prediction_files:
            by_sample.setdefault(s, []).append(p)
        k = len(by_sample)
        if sorted(by_sample) != list(range(k)):
            raise ManifestError(
                f"sample indices {sorted(by_sample)} are not dense 0..{k - 1}",
                sub.subject_id,
            )
        for s, patch_indices in by_sample.items():
            _check_dense(patch_indices, n, sub.subject_id, f"sample {s}")
    referenced = [p for _, p in sub.feature_files]
    referenced += [p for _, p in sub.logit_files or []]
    referenced += [p for _, _, p in sub.sample_prediction_files or []]
    if sub.ground_truth_path is not None:
        referenced.append(sub.ground_truth_path)
    for p in referenced:
        if not p.is_file():
            raise MissingFile(f"referenced file does not exist: {p}", sub.subject_id)


@dataclass
class _Builder:
    subject_id: str
    fields: dict = field(default_factory=dict)
    features: list = field(default_factory=list)
    logits: list = field(default_factory=list)
    samples: list = field(default_factory=list)


def _finish(b: _Builder, base: Path, line_no: int) -> SubjectManifest:
    for key in ("role", "dataset_tag", "image_shape", "patch_size", "feature_tap"):
        if key not in b.fields:
            raise ManifestError(f"missing '{key}' (record ends at line {line_no})",
                                b.subject_id)
    if not b.features:
        raise ManifestError("no feature files", b.subject_id)
    return SubjectManifest(
        subject_id=b.subject_id,
        role=b.fields["role"],
        dataset_tag=b.fields["dataset_tag"],
        image_shape=b.fields["image_shape"],
        patch_size=b.fields["patch_size"],
        feature_tap=b.fields["feature_tap"],
        feature_files=[(i, base / p) for i, p in b.features],
        logit_files=[(i, base / p) for i, p in b.logits] or None,
        sample_prediction_files=[(s, i, base / p) for s, i, p in b.samples] or None,
        ground_truth_path=(base / b.fields["ground_truth"])
        if "ground_truth" in b.fields
        else None,
    )


def _parse_extents(rest: str, line_no: int, subject_id: str):
    try:
        extents = tuple(int(tok) for tok in rest.split())
    except ValueError:
        raise ManifestError(f"non-integer extent at line {line_no}", subject_id)
    if not extents:
        raise ManifestError(f"empty extent list at line {line_no}", subject_id)
    return extents


def load_manifest(path) -> list[SubjectManifest]:
    """Parse and validate a manifest; order-preserving and deterministic."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(path, exc) from exc
    base = path.parent
    subjects: list[SubjectManifest] = []
    current: _Builder | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word, _, rest = line.partition(" ")
        rest = rest.strip()
        if word == "subject":
            if current is not None:
                raise ManifestError(
                    f"'subject' at line {line_no} before previous record ended",
                    current.subject_id,
                )
            if not rest:
                raise ManifestError(f"'subject' without an id at line {line_no}")
            current = _Builder(rest)
            continue
        if current is None:
            raise ManifestError(f"'{word}' outside a subject record at line {line_no}")
        sid = current.subject_id
        if word == "end":
            subjects.append(_finish(current, base, line_no))
            current = None
        elif word in ("role", "dataset_tag", "feature_tap", "ground_truth"):
            if not rest:
                raise ManifestError(f"'{word}' without a value at line {line_no}", sid)
            current.fields[word] = rest
        elif word in ("image_shape", "patch_size"):
            current.fields[word] = _parse_extents(rest, line_no, sid)
        elif word == "feature" or word == "logit":
            idx_tok, _, p = rest.partition(" ")
            if not p.strip() or not idx_tok.isdigit():
                raise ManifestError(
                    f"'{word}' wants '<patch_index> <path>' at line {line_no}", sid
                )
            entry = (int(idx_tok), p.strip())
            (current.features if word == "feature" else current.logits).append(entry)
        elif word == "sample":
            toks = rest.split(maxsplit=2)
            if len(toks) != 3 or not toks[0].isdigit() or not toks[1].isdigit():
                raise ManifestError(
                    f"'sample' wants '<sample> <patch> <path>' at line {line_no}", sid
                )
            current.samples.append((int(toks[0]), int(toks[1]), toks[2].strip()))
        else:
            raise ManifestError(f"unknown directive '{word}' at line {line_no}", sid)
    if current is not None:
        raise ManifestError("manifest ends inside a record", current.subject_id)
    if not subjects:
        raise ManifestError(f"no subject records in {path}")

    seen_ids = set()
    for sub in subjects:
        if sub.subject_id in seen_ids:
            raise ManifestError("duplicate subject id", sub.subject_id)
        seen_ids.add(sub.subject_id)
        _validate_subject(sub, base)
    taps = {sub.feature_tap for sub in subjects}
    if len(taps) > 1:
        raise MixedTap(f"manifest mixes feature taps {sorted(taps)}")
    return subjects


def write_manifest(subjects: list[SubjectManifest], path) -> None:
    """Emit the schema above with paths relative to the manifest directory."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        return Path(os.path.relpath(Path(p).resolve(), base)).as_posix()

    lines = []
    for sub in subjects:
        lines.append(f"subject {sub.subject_id}")
        lines.append(f"role {sub.role}")
        lines.append(f"dataset_tag {sub.dataset_tag}")
        lines.append("image_shape " + " ".join(str(e) for e in sub.image_shape))
        lines.append("patch_size " + " ".join(str(e) for e in sub.patch_size))
        lines.append(f"feature_tap {sub.feature_tap}")
        for i, p in sub.feature_files:
            lines.append(f"feature {i} {rel(p)}")
        for i, p in sub.logit_files or []:
            lines.append(f"logit {i} {rel(p)}")
        for s, i, p in sub.sample_prediction_files or []:
            lines.append(f"sample {s} {i} {rel(p)}")
        if sub.ground_truth_path is not None:
            lines.append(f"ground_truth {rel(sub.ground_truth_path)}")
        lines.append("end")
        lines.append("")
    try:
        path.write_text("\n".join(lines), encoding="utf-8")
    except OSError as exc:
        raise IOFailure(path, exc) from exc
