"""Scratch vs LM-initialised prediction network on 300 training utterances, then text-only adaptation."""

from _common import dump, parser, setup

from lstransducer.experiments import Recipe, adaptation, pretraining_ablation

p = parser(__doc__)
p.add_argument("--n-utts", type=int, default=300)
p.add_argument("--seeds", default="0,1,2")
p.add_argument("--skip-adaptation", action="store_true")
args = p.parse_args()
out = setup(args)

recipe = Recipe()
abl = pretraining_ablation(recipe, n_utts=args.n_utts, seeds=[int(s) for s in args.seeds.split(",")])
result = {"pretraining": {k: abl[k] for k in ("rows", "scratch_mean", "pretrained_mean")}}
print(f"scratch {abl['scratch_mean']:.2f}  pretrained {abl['pretrained_mean']:.2f}")
if not args.skip_adaptation:
    ad = adaptation(recipe, abl["models"], abl["lm"], abl["splits"]["cross_test"])
    result["adaptation"] = ad
    print(f"cross-domain: unadapted {ad['unadapted_mean']:.2f}  adapted {ad['adapted_mean']:.2f}  "
          f"adapted+fusion {ad['adapted_fusion_mean']:.2f}")
dump(out / "ablation.json", result)
