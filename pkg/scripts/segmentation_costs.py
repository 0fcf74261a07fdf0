"""MAdds and params of the segmentation configurations at full and half resolution."""

from mnv3.segmentation import SegHeadConfig, cost
from mnv3.spec import builtin_spec

CONFIGS = [
    ("v2", dict(head="raspp", filters=256, reduce_last_block=False)),
    ("v2", dict(head="raspp", filters=256)),
    ("v2", dict(head="lraspp", filters=256)),
    ("v2", dict(head="lraspp", filters=128)),
    ("v3-large", dict(head="raspp", filters=256, reduce_last_block=False)),
    ("v3-large", dict(head="raspp", filters=256)),
    ("v3-large", dict(head="lraspp", filters=256)),
    ("v3-large", dict(head="lraspp", filters=128)),
    ("v3-large", dict(head="lraspp", filters=128, output_stride=32)),
    ("v3-small", dict(head="lraspp", filters=128)),
    ("v3-small", dict(head="lraspp", filters=128, output_stride=32)),
]


def main():
    print(f"{'backbone':<9} {'head':<7} {'F':>4} {'OS':>3} {'RF2':>4} {'params':>8} "
          f"{'MAdds(f)':>9} {'MAdds(h)':>9}")
    for name, kw in CONFIGS:
        spec, cfg = builtin_spec(name), SegHeadConfig(**kw)
        full = cost(spec, cfg)
        half = cost(spec, cfg, (512, 1024))
        print(f"{name:<9} {cfg.head.value:<7} {cfg.filters:>4} {cfg.output_stride:>3} "
              f"{'y' if cfg.reduce_last_block else 'n':>4} {full.total_params / 1e6:>7.2f}M "
              f"{full.total_madds / 1e9:>8.2f}B {half.total_madds / 1e9:>8.2f}B")


if __name__ == "__main__":
    main()
