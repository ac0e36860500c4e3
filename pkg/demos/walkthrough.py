"""Follow one device through a run and narrate each adaptation.

    python demos/walkthrough.py [--windows 60] [--seed 0]
"""
import argparse

from edgeadapt.config import ScenarioConfig
from edgeadapt.harness import run_scenario

NARRATED = {
    "TraceShift": "scene changes to {domain}",
    "ShiftConfirmed": "cloud confirms shift to {domain}",
    "ReuseDecision": "reuse decision: {outcome} (candidate {model})",
    "ReuseApplied": "applied {detail} model {model}",
    "FinetuneStarted": "fine-tuning {model} on {samples} labels",
    "TaskEnqueued": "cloud queues retraining of {domain} at level {level}",
    "TaskStarted": "cloud starts retraining {domain}",
    "RetrainCompleted": "cloud finishes {domain} v{version}",
    "ModelDeployed": "deployed {model} v{version} ({detail})",
    "CacheReplaced": "cache {detail}: stored {model} while in {domain}",
}


def path(value):
    if isinstance(value, list) and value and isinstance(value[0], str):
        return "/".join(value)
    return value


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--windows", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    cfg = ScenarioConfig(duration_windows=args.windows, seed=args.seed)
    res = run_scenario(cfg)
    for e in res.events:
        template = NARRATED.get(e["kind"])
        if template is None:
            continue
        fields = {k: path(v) for k, v in e.items()}
        try:
            text = template.format(**fields)
        except KeyError:
            text = e["kind"]
        print(f"{e['t']:9.2f}s  {text}")
    m = res.metrics.scalars()
    print()
    for key in ("shifts_confirmed", "false_alarms", "mean_response_delay",
                "mean_recovery_accuracy", "mean_window_accuracy"):
        print(f"{key:>24}: {m[key]}")


if __name__ == "__main__":
    main()
