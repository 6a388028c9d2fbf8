"""Train one model on the synthetic task and sweep the test-time epsilon."""

from _common import dump, parser, setup

from lstransducer.evaluation import write_tradeoff_csv
from lstransducer.experiments import GRID, Recipe, tradeoff, tradeoff_checks

p = parser(__doc__)
p.add_argument("--n-utts", type=int, default=2000)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--epochs", type=int, default=None, help="override the recipe's 30 epochs")
p.add_argument("--grid", default=",".join(f"{g:g}" for g in GRID))
args = p.parse_args()
out = setup(args)

recipe = Recipe()
if args.epochs:
    recipe.train.epochs = args.epochs
res = tradeoff(recipe, n_utts=args.n_utts, seed=args.seed, grid=[float(x) for x in args.grid.split(",")])
write_tradeoff_csv(out / "tradeoff.csv", res["points"])
summary = {"offline_bleu": round(res["offline_bleu"], 3), "checks": tradeoff_checks(res["points"]),
           "points": [vars(p) for p in res["points"]]}
dump(out / "tradeoff.json", summary)
print(open(out / "tradeoff.csv").read(), end="")
print("offline BLEU", summary["offline_bleu"], summary["checks"])
