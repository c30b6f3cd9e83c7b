"""Simulate one synthetic region, estimate every zone and compare with the truth.

    python demos/recovery_demo.py [seed]
"""

import sys

import numpy as np

from flowcast.data_model import aggregate_parties, build_zones, reconcile_electorates
from flowcast.ei_estimator import fit_zone, flow_counts
from flowcast.reports import table1_text
from flowcast.synth_oracle import SynthSpec, simulate
from flowcast.volatility import aggregate_region, volatility_indexes


def main(seed=0):
    data = simulate(SynthSpec(seed=seed))
    zones = [reconcile_electorates(z)
             for z in build_zones(aggregate_parties(data.records, data.aggregation))]
    truth = np.asarray(data.truth["P"])
    flows, errors = [], []
    for k, z in enumerate(zones):
        est = fit_zone(z)
        errors.append(np.abs(est.P - truth[k]))
        flows.append(flow_counts(est, z))
    errors = np.array(errors)
    print(f"{len(zones)} zones, {sum(len(z) for z in zones)} stations")
    print(f"cells within 0.03 of the truth: {100 * np.mean(errors <= 0.03):.1f}%")
    print(f"largest error: {errors.max():.3f}")
    region = aggregate_region(flows)
    print()
    print(table1_text(region))
    rec = volatility_indexes(region, loyalty="containment")
    print()
    print(f"between-party volatility {rec.party_switch_pct:.1f}%, "
          f"toward abstention {rec.to_abstention_pct:.1f}%")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
