"""
Estimating accuracy without labels
==================================

Fit the GNN regressor on the labeled DiscGraphs, then estimate the frozen
classifier's accuracy on unlabeled shifted graphs.  ATC, the confidence
threshold rule and the MMD regression are run on the same targets for
comparison.  Target labels are read only to print the truth column.
"""
import numpy as np

from gnneval import baselines as bl
from gnneval import pipeline
from gnneval.augment import AugmentConfig, build_meta_set, seed_subgraph
from gnneval.discrepancy import DiscrepancyBuilder
from gnneval.evaluator import EvaluatorConfig, estimate_accuracy, train_evaluator
from gnneval.zoo import ModelConfig, accuracy, embed_and_predict, model_outputs, train_classifier

bench = pipeline.SBMBenchmark(nodes_per_class=100, seed=2)
g, split = bench.source(), bench.split()
model = train_classifier(g, split, ModelConfig.for_arch("GCN", g.feature_dim, g.num_classes))

metas = build_meta_set(seed_subgraph(g, split), AugmentConfig(K=80, seed=0))
builder = DiscrepancyBuilder(model, g)
discs = [builder.build(mg) for mg in metas]
ev = train_evaluator(discs, EvaluatorConfig(input_dim=g.num_nodes, epochs=200))
print(f"evaluator: best held-out MSE {ev.best_mse:.2e} at epoch {ev.best_epoch}")

# baseline ingredients from the source graph's validation nodes
z_src, logits_src = model_outputs(model, g)
val_logits, val_y = logits_src[split.val], g.labels[split.val]
t_mc = bl.atc_fit_threshold(val_logits, val_y, "MC")
t_ne = bl.atc_fit_threshold(val_logits, val_y, "NE")
feats = [bl.mmd(z_src, embed_and_predict(model, mg.graph)[0]) for mg in metas]
reg = bl.autoeval_g_fit(feats, [d.label for d in discs])

print()
print(f"{'target':10s} {'truth':>6s} {'GNNEval':>8s} {'ATC-MC':>7s} {'ATC-NE':>7s} {'Thr0.7':>7s} {'AutoEv':>7s}")
errs = []
for name, t in bench.targets().items():
    blind = t.without_labels()
    est = estimate_accuracy(ev, builder.build_inference(blind, name))
    z, logits = model_outputs(model, blind)
    truth = accuracy(logits.argmax(axis=1), t.labels)
    errs.append(abs(est - truth))
    print(f"{name:10s} {truth:6.3f} {est:8.3f} {bl.atc_estimate(logits, t_mc, 'MC'):7.3f} "
          f"{bl.atc_estimate(logits, t_ne, 'NE'):7.3f} {bl.threshold_estimate(logits, 0.7):7.3f} "
          f"{bl.autoeval_g_estimate(reg, bl.mmd(z_src, z)):7.3f}")
print()
print(f"GNNEvaluator MAE: {100 * np.mean(errs):.2f} percentage points")
