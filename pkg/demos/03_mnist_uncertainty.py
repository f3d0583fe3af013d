"""Misclassification awareness and adversarial attacks on MNIST.

Trains a small moment network, then
  * compares output entropy of correct and misclassified digits layer by layer,
  * attacks it with FGSM and watches accuracy and entropy,
  * removes the noise in front of the first Heaviside layer, which zeroes the
    input gradient and leaves FGSM nothing to follow.

    python demos/03_mnist_uncertainty.py /path/to/mnist [epochs]
"""
import sys

from mnn.cli import attack_table, build_model, layer_separability, load_config, load_task_data, train_config
from mnn.smuc import train
from mnn.uncertainty import gradient_masking_defense

if len(sys.argv) < 2:
    sys.exit(__doc__)
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 3

for kind in ("relu", "heaviside"):
    cfg = load_config()
    cfg["data"]["mnist_dir"] = sys.argv[1]
    cfg["model"]["kind"] = kind
    cfg["train"]["epochs"] = epochs
    train_set, test_set = load_task_data(cfg)
    model, log = train(build_model(cfg), train_set, train_config(cfg), test=test_set)
    print(f"\n{kind}: test accuracy {log.last('test', 'accuracy'):.4f}")
    _, _, _, rows = layer_separability(model, test_set)
    print("  entropy separability, misclassified vs correct, by layer:",
          ", ".join(f"{s:.3f}" for _, s in rows))

    small = test_set.subset(slice(0, 2000))
    print("  FGSM   eps  accuracy  median entropy")
    for eps, acc, h in attack_table(model, small, [0.0, 0.02, 0.05, 0.1]):
        print(f"        {eps:4.2f}  {acc:8.4f}  {h:8.3f}")
    if kind == "heaviside":
        print("  with the first-layer noise removed:")
        for eps, acc, h in attack_table(gradient_masking_defense(model), small, [0.0, 0.05, 0.1]):
            print(f"        {eps:4.2f}  {acc:8.4f}")
