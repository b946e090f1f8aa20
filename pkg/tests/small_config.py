"""A 48x48 scenario that runs the whole pipeline in a few seconds."""
import copy

SMALL = {
    "phantom": {"shape": [48, 48], "pixel_size": 0.1728,
                "disks": [{"center": [24, 24], "radius": 19, "material": 0},
                          {"center": [24, 13], "radius": 5, "material": 1},
                          {"center": [13, 24], "radius": 5, "material": 2},
                          {"center": [35, 24], "radius": 5, "material": 2, "fraction": 0.5,
                           "balance": 0}]},
    "geometry": {"n_angles": 60, "n_detectors": 72, "detector_spacing": 0.1728},
    "dictionary": {"n_patches": 400, "n_atoms": 80, "train_iters": 3},
    "dlimd": {"outer_iters": 2},
    "tvmd": {"outer_iters": 2, "lambda": 0.01},
    "rois": {"basis": [{"rects": [[28, 28, 34, 34]]}, {"rects": [[22, 11, 27, 16]]},
                       {"rects": [[11, 22, 16, 27]]}],
             "evaluation": {"al": {"rects": [[21, 10, 28, 17]]},
                            "water": {"rects": [[28, 28, 36, 36]]}}},
}


def small(**overrides):
    cfg = copy.deepcopy(SMALL)
    for k, v in overrides.items():
        cfg[k] = v
    return cfg
