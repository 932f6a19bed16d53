"""Push one 300x300 image through the vgg16 preset and print the spatial sizes."""
import time

import numpy as np

from bloodseg import dced_net

if __name__ == "__main__":
    model = dced_net.build(dced_net.NetworkConfig.preset("vgg16"))
    print(f"parameters: {model.num_parameters():,}")
    t0 = time.perf_counter()
    logits = model.forward(np.random.default_rng(0).normal(size=(1, 3, 300, 300)))
    pools = [extra.output_shape[2:] for kind, _, extra in model._cache if kind == "pool"]
    print("encoder:", " -> ".join(str(s) for s in [(300, 300)] + pools))
    print("logits:", logits.shape, f"({time.perf_counter() - t0:.1f} s)")
