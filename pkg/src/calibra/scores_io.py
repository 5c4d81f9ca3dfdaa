"""CSV format for score matrices with labels.

A scores file is UTF-8 CSV with a one-line header ``kind,K`` (where
``kind`` is ``logits`` or ``simplex``) followed by N data rows of K
reals and one integer label.  Reals use ``.`` as the decimal separator
and are written as their shortest round-trippable decimal form, so a
read/write cycle is lossless bit for bit.

Parsing is strict: any malformed cell fails with the offending row
number instead of guessing.
"""

from __future__ import annotations

import csv
import os
import tempfile

import numpy as np

from .predictions import KIND_LOGITS, KIND_SIMPLEX, PredictionSet


class ScoresFormatError(ValueError):
    """Raised for structurally invalid scores files."""


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def read_scores(path) -> PredictionSet:
    """Parse a scores file into a :class:`PredictionSet`.

    Raises
    ------
    ScoresFormatError
        On a malformed header or data row; the message carries the
        1-based row number.
    """
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ScoresFormatError(f"{path}: empty file") from None
        if len(header) != 2:
            raise ScoresFormatError(
                f"{path}: row 1: header must be 'kind,K', got {len(header)} cells"
            )
        kind = header[0].strip()
        if kind not in (KIND_LOGITS, KIND_SIMPLEX):
            raise ScoresFormatError(f"{path}: row 1: unknown kind {kind!r}")
        try:
            num_classes = int(header[1])
        except ValueError:
            raise ScoresFormatError(
                f"{path}: row 1: class count {header[1]!r} is not an integer"
            ) from None
        if num_classes < 2:
            raise ScoresFormatError(f"{path}: row 1: need K >= 2, got {num_classes}")

        score_rows, labels = [], []
        for number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != num_classes + 1:
                raise ScoresFormatError(
                    f"{path}: row {number}: expected {num_classes + 1} cells, "
                    f"got {len(row)}"
                )
            try:
                score_rows.append([float(cell) for cell in row[:-1]])
            except ValueError:
                raise ScoresFormatError(
                    f"{path}: row {number}: non-numeric score cell"
                ) from None
            cell = row[-1].strip()
            try:
                label = int(cell)
            except ValueError:
                raise ScoresFormatError(
                    f"{path}: row {number}: label {cell!r} is not an integer"
                ) from None
            if not 0 <= label < num_classes:
                raise ScoresFormatError(
                    f"{path}: row {number}: label {label} outside [0, {num_classes - 1}]"
                )
            labels.append(label)

    if not score_rows:
        raise ScoresFormatError(f"{path}: no data rows")
    try:
        return PredictionSet(np.array(score_rows), np.array(labels), kind)
    except ValueError as exc:
        raise ScoresFormatError(f"{path}: {exc}") from None


def write_scores(path, preds: PredictionSet):
    """Write a prediction set as a scores file (atomic)."""
    lines = [f"{preds.kind},{preds.n_classes}"]
    for row, label in zip(preds.scores, preds.labels):
        cells = [repr(float(value)) for value in row]
        cells.append(str(int(label)))
        lines.append(",".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")
