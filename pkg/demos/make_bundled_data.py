"""Regenerate the bundled Umbria-like synthetic dataset and its run config.

Two zones get a planted local bump (FI -> FdI in zone 2, M5S -> PD in
zone 17); the config adds a dummy for each so the models absorb them.

    python demos/make_bundled_data.py
"""

import json
from pathlib import Path

import flowcast
from flowcast.synth_oracle import COVARIATES, DEFAULT_RECIPE, SynthSpec, generate, plant_outlier

TARGET = Path(flowcast.__file__).parent / "data" / "umbria_like"
SEED = 2022

MERGED_LEFT = {"M5S-OL-PD-OCL": ["M5S-OL", "PD", "OCL"]}
MODELS = [
    {"anchor": "M5S", "groups": {"PD-OCL": ["PD", "OCL"]}, "reference": "M5S-OL",
     "dummies": {"17": ["PD-OCL"]}},
    {"anchor": "PD", "reference": "PD"},
    {"anchor": "FI", "groups": MERGED_LEFT, "reference": "Lega-FI-OCR",
     "dummies": {"2": ["FdI"]}},
    {"anchor": "Lega", "groups": MERGED_LEFT, "reference": "Lega-FI-OCR"},
    {"anchor": "No vote", "reference": "No vote"},
]


def main():
    spec = SynthSpec(seed=SEED)
    spec = plant_outlier(spec, "2", "FI", "FdI", 1.2)
    spec = plant_outlier(spec, "17", "M5S", "PD", 1.2)
    paths = generate(spec, TARGET)
    config = {
        "stations": paths["stations"].name,
        "covariates": paths["covariates"].name,
        "aggregation": paths["aggregation"].name,
        "min_stations": 10,
        "reconcile": "proportional-scale",
        "abstention": "No vote",
        "loyalty": "containment",
        "recipe": list(DEFAULT_RECIPE),
        "covariate_names": list(COVARIATES),
        "models": MODELS,
        "stepwise_schedule": [0.5, 1.0],
        "significance": [0.01, 0.08],
        "marginal_step": 1e-5,
        "residual_threshold": 2.0,
        "report_destinations": ["FdI", "No vote"],
        "seed": SEED,
    }
    with open(TARGET / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2)
        fh.write("\n")
    print(f"wrote {TARGET}")


if __name__ == "__main__":
    main()
