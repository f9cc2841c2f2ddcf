"""Fixed food-delivery catalog: 30 categories, 200 merchants, 1000 products.

The catalog does not depend on any run seed, so every synthetic corpus and
every candidate set refers to the same items.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CATEGORIES = (
    "Sichuan", "Cantonese", "Hunan", "Dumplings", "Hotpot", "Barbecue",
    "Noodles", "Congee", "Bakery", "Dessert", "Bubble Tea", "Coffee",
    "Burgers", "Pizza", "Fried Chicken", "Sushi", "Korean", "Thai",
    "Vietnamese", "Indian", "Salad", "Seafood", "Vegetarian", "Breakfast",
    "Rice Bowls", "Malatang", "Skewers", "Juice", "Fruit", "Snacks",
)
N_MERCHANTS = 200
N_PRODUCTS = 1000

_MERCHANT_ADJ = (
    "Golden", "Lucky", "Red", "Jade", "Happy", "Old Town", "Lotus", "Dragon",
    "Bamboo", "Silver", "Sunny", "Harbor", "Maple", "Panda", "Crystal",
    "Royal", "Peach", "Willow", "Ocean", "Star",
)
_MERCHANT_NOUN = (
    "House", "Kitchen", "Corner", "Garden", "Bistro", "Express", "Diner",
    "Cafe", "Station", "Palace",
)
_DISH_STYLE = (
    "Classic", "Spicy", "Crispy", "Braised", "Steamed", "Smoked", "Grilled",
    "Sweet", "Tangy", "Garlic", "Pepper", "Honey", "Sesame", "Ginger", "Herb",
    "Golden", "House", "Chef's", "Family", "Mini", "Jumbo", "Double",
    "Signature", "Seasonal", "Homestyle",
)
_DISH = (
    "Chicken", "Pork Ribs", "Beef Slices", "Tofu", "Fish Fillet", "Shrimp",
    "Duck", "Lamb", "Eggplant", "Cabbage", "Rice Cake", "Buns", "Wontons",
    "Potstickers", "Noodle Soup", "Fried Rice", "Spring Rolls", "Pancake",
    "Skewer Set", "Hot Pot Set", "Bento", "Greens Bowl", "Sandwich", "Burger",
    "Flatbread", "Wings", "Tart", "Cake", "Pudding", "Milk Tea", "Latte",
    "Smoothie", "Melon Cup", "Rice Porridge", "Maki Roll", "Curry", "Pho",
    "Bibimbap", "Kimchi Plate", "Snack Box",
)

PRICE_BAND_WIDTH = 1000
N_PRICE_BANDS = 8  # [0,10), [10,20), ..., [60,70), 70+


@dataclass(frozen=True)
class Merchant:
    merchant_id: str
    name: str
    category: str


@dataclass(frozen=True)
class Product:
    product_id: str
    name: str
    merchant_id: str
    category: str
    price_minor: int


@dataclass(frozen=True)
class Candidate:
    """Something a model may recommend: an id plus its display string."""

    item_id: str
    display: str


def price_band_label(price_minor: int) -> str:
    idx = min(price_minor // PRICE_BAND_WIDTH, N_PRICE_BANDS - 1)
    lo = idx * PRICE_BAND_WIDTH // 100
    if idx == N_PRICE_BANDS - 1:
        return f"{lo}+"
    return f"{lo}-{lo + PRICE_BAND_WIDTH // 100}"


def price_band_midpoint(label: str) -> int:
    """Representative price (minor units) of a band label."""
    if label.endswith("+"):
        lo = int(label[:-1]) * 100
        return lo + PRICE_BAND_WIDTH // 2
    lo, hi = (int(x) * 100 for x in label.split("-"))
    return (lo + hi) // 2


@dataclass(frozen=True)
class Catalog:
    categories: tuple[str, ...]
    merchants: tuple[Merchant, ...]
    products: tuple[Product, ...]

    @functools.cached_property
    def merchant_by_id(self) -> dict[str, Merchant]:
        return {m.merchant_id: m for m in self.merchants}

    @functools.cached_property
    def merchants_by_category(self) -> dict[str, list[Merchant]]:
        out: dict[str, list[Merchant]] = {c: [] for c in self.categories}
        for m in self.merchants:
            out[m.category].append(m)
        return out

    @functools.cached_property
    def products_by_merchant(self) -> dict[str, list[Product]]:
        out: dict[str, list[Product]] = {m.merchant_id: [] for m in self.merchants}
        for p in self.products:
            out[p.merchant_id].append(p)
        return out

    @functools.cached_property
    def max_price(self) -> int:
        return max(p.price_minor for p in self.products)

    @functools.cached_property
    def category_mean_price(self) -> dict[str, float]:
        sums: dict[str, list[int]] = {c: [] for c in self.categories}
        for p in self.products:
            sums[p.category].append(p.price_minor)
        return {c: float(np.mean(v)) for c, v in sums.items()}

    @functools.cached_property
    def merchant_mean_price(self) -> dict[str, float]:
        return {
            mid: float(np.mean([p.price_minor for p in ps]))
            for mid, ps in self.products_by_merchant.items()
        }

    @property
    def price_bands(self) -> tuple[str, ...]:
        return tuple(price_band_label(i * PRICE_BAND_WIDTH) for i in range(N_PRICE_BANDS))

    def candidates(self, label_kind: str) -> list[Candidate]:
        """Candidate items for a task's label kind, in catalog order."""
        if label_kind == "category":
            return [Candidate(c, c) for c in self.categories]
        if label_kind in ("poi", "merchant"):
            return [Candidate(m.merchant_id, m.name) for m in self.merchants]
        if label_kind == "price_band":
            return [Candidate(b, b) for b in self.price_bands]
        raise ValueError(f"unknown label kind {label_kind!r}")

    def to_dict(self) -> dict:
        return {
            "categories": list(self.categories),
            "merchants": [asdict(m) for m in self.merchants],
            "products": [asdict(p) for p in self.products],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        return cls(
            categories=tuple(d["categories"]),
            merchants=tuple(Merchant(**m) for m in d["merchants"]),
            products=tuple(Product(**p) for p in d["products"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Catalog":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@functools.lru_cache(maxsize=1)
def default_catalog() -> Catalog:
    rng = np.random.default_rng(20230301)
    merchants = []
    for i in range(N_MERCHANTS):
        cat = CATEGORIES[i % len(CATEGORIES)]
        name = f"{_MERCHANT_ADJ[i % 20]} {cat} {_MERCHANT_NOUN[i // 20]}"
        merchants.append(Merchant(f"m{i:03d}", name, cat))
    products = []
    for j in range(N_PRODUCTS):
        m = merchants[j % N_MERCHANTS]
        name = f"{_DISH_STYLE[j // len(_DISH)]} {_DISH[j % len(_DISH)]}"
        price = int(rng.integers(120, 601)) * 10
        products.append(Product(f"p{j:04d}", name, m.merchant_id, m.category, price))
    return Catalog(CATEGORIES, tuple(merchants), tuple(products))
