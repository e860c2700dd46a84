//! Template grammar for queries: `[article] [color] shape-word`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Color, ShapeKind};

/// A rendered query plus the filters it denotes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub color_filter: Option<Color>,
    pub shape_filter: Option<ShapeKind>,
}

impl Query {
    /// Render filters with random article and number.
    pub fn render<R: Rng + ?Sized>(
        color: Option<Color>,
        shape: Option<ShapeKind>,
        rng: &mut R,
    ) -> Query {
        let text = if color.is_none() && shape.is_none() {
            "all shapes".to_string()
        } else {
            let mut words: Vec<&str> = Vec::with_capacity(3);
            match rng.random_range(0..3) {
                0 => words.push("the"),
                1 => words.push("all"),
                _ => {}
            }
            if let Some(c) = color {
                words.push(c.word());
            }
            let plural = rng.random_bool(0.5);
            words.push(shape_word(shape, plural));
            words.join(" ")
        };
        Query {
            text,
            color_filter: color,
            shape_filter: shape,
        }
    }

    /// Recover filters from text produced by the grammar. Returns `None` for
    /// text outside the grammar.
    pub fn parse(text: &str) -> Option<Query> {
        let lower = text.to_lowercase();
        let mut words: Vec<&str> = lower.split_whitespace().collect();
        if matches!(words.first(), Some(&"the") | Some(&"all")) {
            words.remove(0);
        }
        let color = words.first().and_then(|w| Color::from_word(w));
        if color.is_some() {
            words.remove(0);
        }
        let [shape_word] = words.as_slice() else { return None };
        let shape = parse_shape_word(shape_word)?;
        Some(Query {
            text: text.to_string(),
            color_filter: color,
            shape_filter: shape,
        })
    }

    /// Whether an object with these attributes satisfies the filters.
    pub fn matches(&self, kind: ShapeKind, color: Color) -> bool {
        self.color_filter.is_none_or(|c| c == color) && self.shape_filter.is_none_or(|k| k == kind)
    }
}

fn shape_word(shape: Option<ShapeKind>, plural: bool) -> &'static str {
    match (shape, plural) {
        (Some(ShapeKind::Circle), false) => "circle",
        (Some(ShapeKind::Circle), true) => "circles",
        (Some(ShapeKind::Square), false) => "square",
        (Some(ShapeKind::Square), true) => "squares",
        (Some(ShapeKind::Triangle), false) => "triangle",
        (Some(ShapeKind::Triangle), true) => "triangles",
        (None, false) => "shape",
        (None, true) => "shapes",
    }
}

/// `Some(None)` is the generic "shape(s)" word.
fn parse_shape_word(w: &str) -> Option<Option<ShapeKind>> {
    Some(match w {
        "circle" | "circles" => Some(ShapeKind::Circle),
        "square" | "squares" => Some(ShapeKind::Square),
        "triangle" | "triangles" => Some(ShapeKind::Triangle),
        "shape" | "shapes" => None,
        _ => return None,
    })
}

/// Sample filters uniformly over `{red, green, blue, none} x {circle,
/// square, triangle, none}` and render them.
pub fn generate_query(seed: u64) -> Query {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_query(&mut rng)
}

pub(crate) fn sample_query<R: Rng + ?Sized>(rng: &mut R) -> Query {
    let color = match rng.random_range(0..4) {
        0 => Some(Color::Red),
        1 => Some(Color::Green),
        2 => Some(Color::Blue),
        _ => None,
    };
    let shape = match rng.random_range(0..4) {
        0 => Some(ShapeKind::Circle),
        1 => Some(ShapeKind::Square),
        2 => Some(ShapeKind::Triangle),
        _ => None,
    };
    Query::render(color, shape, rng)
}
