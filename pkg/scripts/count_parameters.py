"""Per-stage parameter counts for a model config (default: the full-size model)."""
import sys
from collections import defaultdict

from deformableformer.model import ModelConfig, build_model, full_config


def main(path=None):
    cfg = ModelConfig.from_json(path) if path else full_config()
    for kind in ("deformable", "pooling"):
        model = build_model(ModelConfig.from_dict({**cfg.to_dict(), "mixer_kind": kind}))
        groups = defaultdict(int)
        for name, p in model.named_parameters():
            key = ".".join(name.split(".")[:2]) if name.startswith("stages") else "head"
            groups[key] += p.value.size
        total = sum(groups.values())
        print(f"{kind}: {total:,} parameters")
        for key, n in groups.items():
            print(f"  {key:10s} {n:>12,}")


if __name__ == "__main__":
    main(*sys.argv[1:2])
