"""
Node classifiers and what distribution shift does to them
=========================================================

Train the five classifier architectures on a synthetic stochastic block
model, then score each one on shifted copies of a fresh graph from the same
family.  The accuracy drop is what the rest of the package tries to predict
without labels.
"""
import numpy as np

from gnneval import pipeline
from gnneval.zoo import ARCHS, ModelConfig, accuracy, embed_and_predict, train_classifier

bench = pipeline.SBMBenchmark(nodes_per_class=150, seed=0)
g = bench.source()
split = bench.split()
print(f"source: {g.num_nodes} nodes, {g.num_edges} edges, {g.feature_dim} features, "
      f"{g.num_classes} classes")
print(f"split: {split.train.size} train / {split.val.size} val / {split.test.size} test")

# labels of the targets are used here only to print the true accuracy
targets = bench.targets()

models = {}
for arch in ARCHS:
    cfg = ModelConfig.for_arch(arch, g.feature_dim, g.num_classes, seed=0)
    models[arch] = train_classifier(g, split, cfg)

print()
print(f"{'arch':6s} {'val':>6s} " + " ".join(f"{name:>10s}" for name in targets))
for arch, m in models.items():
    accs = [accuracy(embed_and_predict(m, t)[1], t.labels) for t in targets.values()]
    print(f"{arch:6s} {m.best_val_acc:6.3f} " + " ".join(f"{a:10.3f}" for a in accs))

# the embedding Z (16 wide) is the classifier's view of each node
z, _ = embed_and_predict(models["GCN"], g)
print()
print("GCN embedding shape:", z.shape, " mean row norm:", round(float(np.linalg.norm(z, axis=1).mean()), 3))
