"""Where does gated attention look?

Train a bag classifier on Gaussian bags whose positives hide a few shifted
instances, then print the attention weights of one positive bag next to the
hidden instance labels.  The witnesses should collect most of the weight.
"""
import numpy as np
import torch

from coupledmil.aggregator import aggregate_attention
from coupledmil.bagdata import generate_gaussian_bags
from coupledmil.config import StageOneConfig
from coupledmil.embedder import EmbedderArch, build_embedder
from coupledmil.trainer import evaluate, precompute_embeddings, train_bag_stage

dataset = generate_gaussian_bags(120, (10, 20), dim=8, class_separation=4.0, seed=3, witness_rate=0.2)
embedder = build_embedder(EmbedderArch.desk((8,)), seed=0)
cache = precompute_embeddings(embedder, dataset)
labels = {bag.id: bag.label for bag in dataset}

aggregator, classifier, history = train_bag_stage(cache, labels, "attention", StageOneConfig(epochs=30))
print(f"bag loss {history[0]['loss']:.3f} -> {history[-1]['loss']:.3f}")
print("training metrics:", evaluate(aggregator, classifier, cache, labels, "train").row())

bag = next(b for b in dataset if b.label == 1)
with torch.no_grad():
    weights = aggregate_attention(aggregator, cache[bag.id]).weights.numpy()
truth = np.array([inst.true_class for inst in bag.instances])
for k in np.argsort(-weights):
    print(f"  instance {k:2d}  weight {weights[k]:.3f}  {'witness' if truth[k] else ''}")
print(f"weight on witnesses: {weights[truth == 1].sum():.2f} "
      f"(uniform pooling would give {truth.mean():.2f})")
