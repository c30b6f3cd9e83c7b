"""Plant a local bump, see it flagged, then absorb it with a zone dummy.

    python demos/outlier_workflow.py [bump]
"""

import sys

from flowcast.covariate_lab import add_zone_dummies
from flowcast.data_model import aggregate_parties, build_zones, reconcile_electorates
from flowcast.ei_estimator import fit_zone, flow_counts
from flowcast.synth_oracle import SynthSpec, plant_outlier, simulate
from flowcast.transition_mnl import (
    build_panel,
    fit,
    mask_with_dummies,
    residual_diagnostics,
    stepwise_select,
)

GROUPS = {"M5S-OL-PD-OCL": ["M5S-OL", "PD", "OCL"]}
REFERENCE = "Lega-FI-OCR"


def main(bump=1.0):
    spec = plant_outlier(SynthSpec(seed=5), "2", "FI", "FdI", bump)
    data = simulate(spec)
    zones = [reconcile_electorates(z)
             for z in build_zones(aggregate_parties(data.records, data.aggregation))]
    flows = [flow_counts(fit_zone(z), z) for z in zones]
    panel = build_panel(flows, "FI", groups=GROUPS)
    X = data.covariates

    m = stepwise_select(panel, X, reference=REFERENCE)
    diag = residual_diagnostics(m, panel)
    print(f"selected {int(m.mask.sum())} coefficients, "
          f"{m.pct_deviance_explained:.1f}% of deviance explained")
    print("flagged cells:", diag["outliers"])

    dmask, names = mask_with_dummies(m, {"zone_2": ["FdI"]})
    m2 = fit(panel, add_zone_dummies(X, ["2"]), mask=dmask, reference=REFERENCE, covariates=names)
    diag2 = residual_diagnostics(m2, panel)
    z = m2.zone_ids.index("2")
    j = m2.option_labels.index("FdI")
    r = m2.nonref_labels.index("FdI")
    print(f"zone_2 dummy on FdI: b = {m2.beta[r, -1]:.2f}, z = {m2.z_ratios[r, -1]:.1f}")
    print(f"standardized residual of (2, FdI): {diag['std_residuals'][z, j]:.2f} -> "
          f"{diag2['std_residuals'][z, j]:.2f}")
    print("flagged cells after the dummy:", diag2["outliers"])


if __name__ == "__main__":
    main(float(sys.argv[1]) if len(sys.argv) > 1 else 1.0)
