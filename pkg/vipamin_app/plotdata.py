"""
Plot-data documents: x/y series, reference lines and heat-map grids that any plotting
tool can render. The published schema is schemas/plot_data.schema.json.
"""
import json
import logging
import os
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ArchiveError
from .utility import to_jsonable

log = logging.getLogger(__name__)

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "schemas", "plot_data.schema.json")


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Series(_Model):
    label: str
    x: List[float]
    y: List[Optional[float]]

    @model_validator(mode="after")
    def _same_length(self):
        if len(self.x) != len(self.y):
            raise ValueError("series %s has %s x and %s y values" % (self.label, len(self.x), len(self.y)))
        return self


class ReferenceLine(_Model):
    label: str
    y: float


class Grid(_Model):
    row_label: str
    column_label: str
    rows: List[str]
    columns: List[str]
    values: List[List[Optional[float]]]

    @model_validator(mode="after")
    def _shape(self):
        if len(self.values) != len(self.rows) or any(len(row) != len(self.columns) for row in self.values):
            raise ValueError("grid values must be rows x columns")
        return self


class PlotData(_Model):
    metric: Literal["entropy", "energy", "deep-energy", "grassmann", "sweep", "compare"]
    title: str
    x_label: str = ""
    y_label: str = ""
    series: List[Series] = Field(default_factory=list)
    reference_lines: List[ReferenceLine] = Field(default_factory=list)
    grid: Optional[Grid] = None
    metadata: dict = Field(default_factory=dict)


def write_plot_data(filepath, plot):
    with open(filepath, "w") as f:
        json.dump(to_jsonable(plot.model_dump()), f, indent=2)
    log.debug("Wrote plot data %s", filepath)
    return filepath


def read_plot_data(filepath):
    try:
        with open(filepath) as f:
            return PlotData.model_validate(json.load(f))
    except (OSError, ValueError, ValidationError) as e:
        raise ArchiveError("Cannot read plot data %s: %s" % (filepath, e))


def published_schema():
    with open(SCHEMA_PATH) as f:
        return json.load(f)


def entropy_plot(run_id, final, epochs=()):
    """
    Per-prompt entropy with the ln(N_e) ceiling as a reference line.

    :param final: EntropyReport of the trained prompts.
    :param epochs: EpochMetrics whose mean entropies form a second series.
    """
    series = [Series(label="%s prompts" % run_id, x=list(range(len(final.per_prompt))), y=final.per_prompt)]
    if epochs:
        series.append(Series(label="%s mean by epoch" % run_id, x=[m.epoch for m in epochs],
                             y=[m.entropy for m in epochs]))
    for h, values in enumerate(final.per_head or []):
        series.append(Series(label="%s head %s" % (run_id, h), x=list(range(len(values))), y=values))
    return PlotData(metric="entropy", title="Prompt attention entropy", x_label="prompt / epoch",
                    y_label="entropy (nats)", series=series,
                    reference_lines=[ReferenceLine(label="ln(N_e)", y=final.max_attainable)],
                    metadata={"run_id": run_id, "layer_index": final.layer_index,
                              "sample_count": final.sample_count})


def energy_plot(run_id, epochs):
    """
    First-block projection energy by epoch, epoch 0 being the initialization.
    """
    x = [m.epoch for m in epochs]
    return PlotData(metric="energy", title="Projection energy", x_label="epoch", y_label="energy",
                    series=[Series(label="%s" % run_id, x=x, y=[m.energy for m in epochs]),
                            Series(label="%s with b_V" % run_id, x=x, y=[m.energy_bias for m in epochs])],
                    reference_lines=[ReferenceLine(label="full collapse", y=1.0)],
                    metadata={"run_id": run_id})


def deep_energy_plot(run_id, epochs):
    """
    One series per block: projection energy by epoch.
    """
    depth = len(epochs[0].layer_energies or [])
    x = [m.epoch for m in epochs]
    return PlotData(metric="deep-energy", title="Projection energy per block", x_label="epoch", y_label="energy",
                    series=[Series(label="block %s" % layer, x=x, y=[m.layer_energies[layer] for m in epochs])
                            for layer in range(depth)],
                    metadata={"run_id": run_id, "depth": depth})


def grassmann_plot(run_id, against, distance, cosine_distance, subspace_dim):
    return PlotData(metric="grassmann", title="LLCR subspace distance", x_label="subspace dimension",
                    y_label="distance",
                    series=[Series(label="grassmannian", x=[subspace_dim], y=[distance]),
                            Series(label="paired cosine distance", x=[subspace_dim], y=[cosine_distance])],
                    metadata={"run_id": run_id, "against": against})


def heatmap_plot(title, row_label, column_label, rows, columns, values, metadata=None, metric="sweep"):
    return PlotData(metric=metric, title=title,
                    grid=Grid(row_label=row_label, column_label=column_label, rows=[str(r) for r in rows],
                              columns=[str(c) for c in columns], values=values),
                    metadata=metadata or {})
