//! Built-in apparel schema: seven entity categories plus normal words.

use std::collections::BTreeMap;

use super::schema::{AttributeSchema, NORMAL_WORD};

const BRANDS: &[&str] = &[
    "aurelle", "bexley", "corvin", "dalvane", "everlin", "faxon", "galleo", "harvik", "isenne",
    "jovane", "kestrel", "lunaro", "marello", "novessa", "orlind", "pellaro", "quinset", "ravelle",
    "solmere", "tavish", "ulmara", "velden", "wrenna", "xandor", "yarrow", "zelmont", "arvola",
    "brisko", "calvette", "dunmore", "elvaro", "fenwick", "glenrose", "hollin", "irvana", "jessup",
    "kindra", "lorwen", "mavis", "norland",
];

const COLORS: &[&str] = &[
    "red", "blue", "black", "white", "navy", "beige", "khaki", "olive", "burgundy", "ivory",
    "charcoal", "coral", "mustard", "lavender", "teal", "camel", "rose-pink", "sky-blue",
    "mint-green", "cream", "grey", "tan", "wine-red", "off-white",
];

const MATERIALS: &[&str] = &[
    "cotton", "linen", "denim", "wool", "silk", "cashmere", "polyester", "leather", "suede",
    "velvet", "chiffon", "corduroy", "nylon", "spandex", "modal", "fleece", "tweed", "satin",
    "jersey", "canvas",
];

const STYLES: &[&str] = &[
    "casual", "vintage", "minimalist", "streetwear", "bohemian", "preppy", "elegant", "sporty",
    "retro", "korean-style", "french-style", "commuter", "romantic", "punk", "classic", "urban",
    "artsy", "athleisure", "workwear", "resort",
];

const GARMENTS: &[&str] = &[
    "jeans", "dress", "coat", "jacket", "shirt", "t-shirt", "skirt", "sweater", "hoodie", "blazer",
    "trousers", "shorts", "cardigan", "vest", "jumpsuit", "trench-coat", "down-jacket", "blouse",
    "polo", "leggings", "overalls", "parka", "tank-top", "culottes", "windbreaker",
];

const ELEMENTS: &[&str] = &[
    "floral-print", "stripe", "plaid", "polka-dot", "lace", "embroidery", "ruffle", "pleat",
    "zipper", "button-placket", "drawstring", "letter-print", "patchwork", "fringe", "bow",
    "ripped-detail", "contrast-trim", "pocket-flap", "houndstooth", "camouflage",
];

const FITS: &[&str] = &[
    "slim-fit", "loose-fit", "high-waist", "low-waist", "straight-leg", "wide-leg", "oversized",
    "cropped", "regular-fit", "a-line", "bodycon", "tapered",
];

const OPENERS: &[&str] = &[
    "this piece is made for everyday wear and effortless charm .",
    "meet your new favorite item for the season .",
    "here is a wardrobe essential you will love .",
    "discover a refined piece that pairs well with anything .",
    "treat yourself to something special this season .",
];

const CLOSERS: &[&str] = &[
    "grab it now and enjoy the compliments .",
    "a smart choice for work weekends and travel .",
    "easy to style and hard to put down .",
    "it will quickly become a staple in your closet .",
];

/// Four phrasings per entity category, each with exactly one slot.
const CLAUSES: &[(&str, [&str; 4])] = &[
    (
        "Brand",
        [
            "it comes from {Brand} .",
            "crafted by the team at {Brand} .",
            "{Brand} delivers quality you can feel .",
            "a new arrival from {Brand} .",
        ],
    ),
    (
        "Color",
        [
            "the {Color} shade looks fresh .",
            "its {Color} tone flatters every skin .",
            "dressed in {Color} for a clean look .",
            "the {Color} hue is easy to match .",
        ],
    ),
    (
        "Material",
        [
            "made of soft {Material} .",
            "the {Material} fabric feels comfortable all day .",
            "breathable {Material} keeps you at ease .",
            "quality {Material} holds its shape .",
        ],
    ),
    (
        "Style",
        [
            "the {Style} vibe suits many occasions .",
            "it carries a {Style} mood .",
            "a {Style} spirit runs through the design .",
            "perfect for lovers of {Style} looks .",
        ],
    ),
    (
        "Category",
        [
            "this {Category} is a must have .",
            "the {Category} works across seasons .",
            "every closet needs a {Category} like this .",
            "a versatile {Category} for daily outfits .",
        ],
    ),
    (
        "Element",
        [
            "the {Element} detail adds interest .",
            "a touch of {Element} makes it stand out .",
            "{Element} accents lift the whole outfit .",
            "thoughtful {Element} finishing shows care .",
        ],
    ),
    (
        "Fit",
        [
            "the {Fit} cut flatters the figure .",
            "a {Fit} silhouette keeps it comfortable .",
            "its {Fit} shape looks neat .",
            "cut {Fit} for an easy line .",
        ],
    ),
];

const TEMPLATE_COUNT: usize = 20;

/// Twenty templates: an opener, one optional clause per entity category in a
/// template-specific order and phrasing, and a closer.
fn templates() -> Vec<String> {
    let n = CLAUSES.len();
    (0..TEMPLATE_COUNT)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).map(|k| (k + i) % n).collect();
            if i % 2 == 1 {
                order.reverse();
            }
            let mut parts = vec![OPENERS[i % OPENERS.len()].to_string()];
            for k in order {
                let phrasing = CLAUSES[k].1[(i + k) % 4];
                parts.push(format!("[ {phrasing} ]"));
            }
            parts.push(CLOSERS[(i / OPENERS.len()) % CLOSERS.len()].to_string());
            parts.join(" ")
        })
        .collect()
}

pub fn default_schema() -> AttributeSchema {
    let lists: [(&str, &[&str]); 7] = [
        ("Brand", BRANDS),
        ("Color", COLORS),
        ("Material", MATERIALS),
        ("Style", STYLES),
        ("Category", GARMENTS),
        ("Element", ELEMENTS),
        ("Fit", FITS),
    ];
    let mut categories = vec![NORMAL_WORD.to_string()];
    let mut lexicons = BTreeMap::new();
    for (name, values) in lists {
        categories.push(name.to_string());
        lexicons.insert(name.to_string(), values.iter().map(|v| v.to_string()).collect());
    }
    AttributeSchema::new(categories, lexicons, templates(), Vec::new()).expect("built-in schema is valid")
}
