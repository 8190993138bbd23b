from .ablation import (
    DEFAULT_GRID,
    DEFAULT_METHODS,
    AblationReport,
    CellSummary,
    RunRecord,
    plot_curves,
    run_ablation,
    summarize,
    write_metrics_csv,
    write_report_csv,
)
from .metrics import (
    MetricsRecord,
    NdviDelta,
    RegionRate,
    RegionSpec,
    confusion_map,
    f1,
    ndvi,
    ndvi_delta,
    region_rates,
    write_png,
)
