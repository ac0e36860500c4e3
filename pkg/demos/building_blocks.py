"""Tour of the library pieces a scenario is assembled from.

    python demos/building_blocks.py

1. The semantic taxonomy: hop distance and reuse ranking.
2. The synthetic world: how accuracy falls with taxonomy distance and
   how fine-tuning from a nearer model converges faster.
3. Onboard shift detection on in-distribution and shifted windows.
4. The wire protocol and the bandwidth-shaped link.
"""
import numpy as np

from edgeadapt.config import ScenarioConfig
from edgeadapt.shift_detect import evaluate_window
from edgeadapt.sim import Simulator
from edgeadapt.taxonomy import TaxonomyTree, encode_table, rank_candidates
from edgeadapt.transport import (LinkModel, ModelDispatch, SimLink, decode_frame, encode_frame,
                                 transfer_time)
from edgeadapt.world import World


def show(path):
    return "/".join(path)


def taxonomy_tour(world):
    print("== taxonomy")
    tree = TaxonomyTree(world.schema)
    for model in world.pretrained_models():
        tree.set_model(model.home, model.version)
    target = ("street", "snowy", "night")
    print(f"{len(tree)} nodes, {len(tree.model_paths())} trained models")
    print(f"ranking models for unseen domain {show(target)}:")
    for path, dist in rank_candidates(tree, target, tree.model_paths())[:4]:
        print(f"  {show(path):28} distance {dist}")
    print(f"encoded table: {len(encode_table(tree))} bytes\n")


def world_tour(world):
    print("== world")
    target = ("street", "clear", "day")
    starts = [("street", "clear", "night"), ("street", "rainy", "day"),
              ("highway", "clear", "day")]
    print("iterations  " + "  ".join(f"{show(s):>22}" for s in starts))
    models = {s: world.retrain_result(s, 1000) for s in starts}
    for it in (0, 50, 200, 1000):
        accs = [world.accuracy(world.finetune_result(models[s], target, it), target)
                for s in starts]
        print(f"{it:>10}  " + "  ".join(f"{a:22.3f}" for a in accs))
    print()


def detection_tour(world, cfg):
    print("== shift detection (8-sample windows)")
    home = ("highway", "clear", "day")
    stats = world.retrain_result(home, cfg.fit_samples).stats
    for label, domain in (("same domain", home), ("night", ("highway", "clear", "night")),
                          ("other road", ("residential", "snowy", "night"))):
        alarms = [evaluate_window(stats, world.sample_features(domain, 8, [9, i])[0], cfg.k)
                  for i in range(200)]
        rate = np.mean([w.alarm for w in alarms])
        print(f"  {label:12} mean score {np.mean([w.score for w in alarms]):8.2f}  "
              f"alarm rate {rate:.2f}")
    print(f"  threshold {alarms[0].threshold:.2f} at k={cfg.k}\n")


def transport_tour(world):
    print("== protocol and link")
    model = world.retrain_result(("street", "clear", "day"), 1000)
    msg = ModelDispatch(device_id=1, path=model.home, model=model)
    raw = encode_frame(msg)
    assert decode_frame(raw) == msg
    link = LinkModel()
    print(f"model dispatch frame: {len(raw)} bytes, "
          f"{transfer_time(len(raw), link):.2f}s at 10 Mbps")
    sim = Simulator()
    down = SimLink(sim, link, "down")
    for _ in range(2):
        down.send(msg, lambda m: print(f"  delivered at t={sim.now:.2f}s"))
    sim.run(60.0)


def main():
    cfg = ScenarioConfig()
    world = World(cfg.world_config())
    taxonomy_tour(world)
    world_tour(world)
    detection_tour(world, cfg)
    transport_tour(world)


if __name__ == "__main__":
    main()
