from .figures import FIGURE_KINDS, PlotSpec, render
from .schema import (
    GROUP_TIMELINE_COLUMNS,
    OCCUPANCY_COLUMNS,
    SPREAD_COLUMNS,
    UTILIZATION_COLUMNS,
    SchemaError,
    Table,
    read_table,
    write_table,
)

__all__ = [
    "FIGURE_KINDS",
    "PlotSpec",
    "render",
    "SchemaError",
    "Table",
    "read_table",
    "write_table",
    "UTILIZATION_COLUMNS",
    "OCCUPANCY_COLUMNS",
    "SPREAD_COLUMNS",
    "GROUP_TIMELINE_COLUMNS",
]
