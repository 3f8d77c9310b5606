"""
Generate memorable names for run directories with timestamps.
"""
import random
from datetime import datetime

from modules.config import RUNS_DIR


CUTE_NAMES = [
    "Bubbles", "Sprinkles", "Cupcake", "Muffin", "Sparkle", "Twinkle", "Jellybean",
    "Buttons", "Peanut", "Cookie", "Waffles", "Pickles", "Nugget", "Biscuit",
    "Noodle", "Pumpkin", "Peaches", "Sunny", "Honey", "Coco", "Pepper", "Ginger",
    "Mocha", "Chai", "Bamboo", "Blossom", "Clover", "Daisy", "Echo", "Frost",
    "Hazel", "Iris", "Luna", "Maple", "Nova", "Olive", "Pearl", "River", "Willow",
    "Ziggy", "Cosmo", "Finn", "Milo", "Oscar", "Teddy", "Yoshi", "Doodle", "Lucky",
]

TIMESTAMP_FORMAT = "%Y-%m-%d-%H-%M-%S"


def _used_names(runs_dir):
    """Names already taken by run directories under runs_dir."""
    if not runs_dir.exists():
        return set()
    return {parse_run_name(p.name)["name"] for p in runs_dir.iterdir() if p.is_dir()}


def generate_run_name(runs_dir=RUNS_DIR, rng=None, now=None):
    """
    Generate a run name like "Maple-2026-03-01-14-22-05".

    Avoids names already used under runs_dir. If all single names are
    taken, combines two names (e.g. HoneyMocha).
    """
    rng = rng or random.Random()
    used = _used_names(runs_dir)
    available = [n for n in CUTE_NAMES if n not in used]

    if available:
        name = rng.choice(available)
    else:
        while True:
            name = rng.choice(CUTE_NAMES) + rng.choice(CUTE_NAMES)
            if name not in used:
                break

    timestamp = (now or datetime.now()).strftime(TIMESTAMP_FORMAT)
    return f"{name}-{timestamp}"


def new_run_dir(runs_dir=RUNS_DIR):
    path = runs_dir / generate_run_name(runs_dir)
    path.mkdir(parents=True, exist_ok=False)
    return path


def parse_run_name(run_name):
    """
    Split a run name into its parts.

    Returns:
        dict with name, timestamp (datetime or None)
    """
    parts = run_name.split("-")
    if len(parts) >= 7:
        try:
            timestamp = datetime.strptime("-".join(parts[1:7]), TIMESTAMP_FORMAT)
            return {"name": parts[0], "timestamp": timestamp}
        except ValueError:
            pass
    return {"name": run_name, "timestamp": None}
