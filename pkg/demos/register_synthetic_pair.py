"""Train a small descriptor net briefly, then register one synthetic pair.

Run with ``python3 demos/register_synthetic_pair.py``. Takes about 35 s.
"""
from dataclasses import replace

from vesselreg.descnet import ConvDescriptorNet, TrainConfig, train
from vesselreg.evalkit import case_error, registration_score
from vesselreg.pipeline import register_pair, registration_case
from vesselreg.synth import VesselTreeSpec, generate_case, generate_tree

spec = VesselTreeSpec()

# twenty vessel trees with their junction keypoints as training data
trees = [generate_tree(replace(spec, seed=s)) for s in range(1000, 1020)]
images, keypoints = zip(*trees)

net = ConvDescriptorNet.create(seed=0)
report = train(net, list(images), list(keypoints),
               TrainConfig(loss="mp_infonce", n_views=9, learning_rate=1e-3, epochs=40))
print(f"mean loss {report.losses[0]:.3f} in the first epoch, {report.losses[-1]:.3f} in the last")

for category, seed in [("high_overlap", 0), ("low_overlap", 100), ("appearance_change", 200)]:
    case = generate_case(spec, category, seed)
    res = register_pair(net, case.image_fixed, case.image_moving, case.keypoints_fixed,
                        case.keypoints_moving, raise_on_failure=False)
    if res.homography is None:
        print(f"{category:18s} {len(res.matches)} matches, no consensus")
        continue
    err = case_error(registration_case(case), res.homography)
    auc = registration_score([err]).auc
    print(f"{category:18s} {len(res.matches)} matches, {int(res.inliers.sum())} inliers, "
          f"control-point error {err:.2f} px, single-case AUC {auc:.2f}")
    print("  stage times (ms): " + ", ".join(f"{k} {1000 * v:.1f}" for k, v in res.timings.items()))
