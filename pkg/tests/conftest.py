from __future__ import annotations

import random

import pytest

from recipebench.config import load_templates
from recipebench.dataset import CaptionRecord, IngredientEntry, Recipe, RecipeCorpus

TITLE_ADJECTIVES = ["簡単", "本格", "ふわふわ", "さっぱり", "こってり", "激ウマ", "時短"]
TITLE_DISHES = [
    "肉じゃが", "カレー", "唐揚げ", "味噌汁", "グラタン", "チャーハン",
    "オムレツ", "麻婆豆腐", "生姜焼き", "ポテトサラダ", "ハンバーグ", "親子丼",
]

INGREDIENT_NAMES = [
    "豚肉", "牛肉", "鶏肉", "ひき肉", "ベーコン", "ウインナー",
    "ごはん", "白米", "パスタ", "うどん", "食パン", "小麦粉",
    "玉ねぎ", "玉葱", "タマネギ", "にんじん", "人参", "じゃがいも",
    "ジャガイモ", "キャベツ", "ほうれん草", "なす", "トマト", "きゅうり",
    "卵", "玉子", "たまご", "豆腐", "油揚げ", "しめじ",
    "塩", "砂糖", "醤油", "しょうゆ", "味噌", "みそ",
    "みりん", "酒", "酢", "こしょう", "胡椒", "ごま油",
    "バター", "マヨネーズ", "ケチャップ", "めんつゆ", "コンソメ", "水",
]

QUANTITIES = ["200g", "100g", "大さじ1", "大さじ2", "小さじ1", "1個", "2本", "1/2カップ", "適量", "少々", ""]

STEP_VERBS = ["切る", "炒める", "煮る", "混ぜる", "焼く", "茹でる", "揚げる", "和える"]

CATEGORIES = ["肉", "魚", "野菜", "ご飯もの", "麺類", "汁物", "お菓子", "卵料理"]


def make_recipe(rng: random.Random, recipe_id: str, category: str | None = None) -> Recipe:
    n_ing = rng.randint(1, 8)
    names = rng.sample(INGREDIENT_NAMES, n_ing)
    ingredients = tuple(
        IngredientEntry(name, rng.choice(QUANTITIES)) for name in names
    )
    n_steps = rng.randint(1, 6)
    steps = tuple(
        f"{rng.choice(names)}を{rng.choice(STEP_VERBS)}。" for _ in range(n_steps)
    )
    top = category if category is not None else rng.choice(CATEGORIES)
    return Recipe(
        id=recipe_id,
        title=f"{rng.choice(TITLE_ADJECTIVES)}{rng.choice(TITLE_DISHES)}",
        ingredients=ingredients,
        steps=steps,
        image_ref=f"images/{recipe_id}.jpg",
        category_path=(top, f"{top}小分類{rng.randint(1, 3)}", "詳細"),
    )


def make_corpus(rng: random.Random, sizes: dict[str, int]) -> RecipeCorpus:
    recipes = []
    counter = 0
    for category in sorted(sizes):
        for _ in range(sizes[category]):
            recipes.append(make_recipe(rng, f"r{counter:05d}", category))
            counter += 1
    return RecipeCorpus(tuple(recipes))


def make_caption_record(rng: random.Random, image_id: str, supercategories: set[str]) -> CaptionRecord:
    subjects = ["犬", "猫", "自転車", "電車", "子供", "空", "建物", "花"]
    captions = tuple(
        f"{rng.choice(subjects)}が{rng.choice(['写っている', '見える', 'いる'])}写真。"
        for _ in range(5)
    )
    return CaptionRecord(image_id=image_id, captions=captions, supercategories=frozenset(supercategories))


@pytest.fixture(scope="session")
def templates():
    return load_templates()


@pytest.fixture()
def rng():
    return random.Random(20240816)
