//! Grammar-based question → program translation over the six question
//! templates.
//!
//! ```text
//! Q    := "what" ATTR "is" "the" DESC [DIR "the" DESC]      query / relate-query
//!       | "is" "there" "a" DESC                             exist
//!       | "is" "the" DESC DIR "the" DESC                    spatial exist
//!       | "do" "the" DESC "and" "the" DESC "have" "the" "same" ATTR
//!       | "how" "many" PDESC "are" "there"                  count
//! DESC := ADJ* (SHAPE | "object")        PDESC := ADJ* (SHAPES | "objects")
//! DIR  := "left" "of" | "right" "of" | "above" | "below"
//! ```
//!
//! A subject description in front of `DIR` becomes a `filter` over the
//! `relate` output; a bare "object" adds no filter.

use super::{AttrType, Constraints, Direction, Program, ProgramError, SetExpr};
use crate::world::{Attribute, Shape};

pub fn shape_plural(shape: Shape) -> &'static str {
    match shape {
        Shape::Cube => "cubes",
        Shape::Sphere => "spheres",
        Shape::Pyramid => "pyramids",
        Shape::Cylinder => "cylinders",
    }
}

/// Words of a description: adjectives in size, color, material order,
/// then the shape noun (or "object"/"objects").
pub fn render_description(c: &Constraints, plural: bool) -> Vec<&'static str> {
    let mut words: Vec<&'static str> = Vec::with_capacity(4);
    if let Some(v) = c.size {
        words.push(v.name());
    }
    if let Some(v) = c.color {
        words.push(v.name());
    }
    if let Some(v) = c.material {
        words.push(v.name());
    }
    words.push(match (c.shape, plural) {
        (Some(s), false) => s.name(),
        (Some(s), true) => shape_plural(s),
        (None, false) => "object",
        (None, true) => "objects",
    });
    words
}

pub fn render_direction(d: Direction) -> &'static [&'static str] {
    match d {
        Direction::Left => &["left", "of"],
        Direction::Right => &["right", "of"],
        Direction::Above => &["above"],
        Direction::Below => &["below"],
    }
}

struct Cursor<'a> {
    tokens: &'a [&'a str],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, expected: &str) -> ProgramError {
        ProgramError::Translate {
            tokens: self.tokens.iter().map(|s| s.to_string()).collect(),
            position: self.pos,
            expected: expected.to_string(),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).copied()
    }

    fn word(&mut self, w: &str) -> Result<(), ProgramError> {
        if self.peek() == Some(w) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.fail(&format!("{w:?}")))
        }
    }

    fn attr(&mut self) -> Result<AttrType, ProgramError> {
        let a = self
            .peek()
            .and_then(AttrType::parse)
            .ok_or_else(|| self.fail("attribute type"))?;
        self.pos += 1;
        Ok(a)
    }

    fn end(&self) -> Result<(), ProgramError> {
        if self.pos == self.tokens.len() {
            Ok(())
        } else {
            Err(self.fail("end of question"))
        }
    }

    fn description(&mut self, plural: bool) -> Result<Constraints, ProgramError> {
        let mut c = Constraints::default();
        loop {
            let Some(w) = self.peek() else {
                return Err(self.fail("description"));
            };
            let adjective = [AttrType::Size, AttrType::Color, AttrType::Material]
                .into_iter()
                .find(|&a| !c.has(a) && Constraints::default().set_word(a, w));
            if let Some(a) = adjective {
                c.set_word(a, w);
                self.pos += 1;
                continue;
            }
            let noun = if plural {
                if w == "objects" {
                    Some(None)
                } else {
                    Shape::ALL
                        .into_iter()
                        .find(|&s| shape_plural(s) == w)
                        .map(Some)
                }
            } else if w == "object" {
                Some(None)
            } else {
                Shape::parse(w).map(Some)
            };
            return match noun {
                Some(shape) => {
                    self.pos += 1;
                    c.shape = shape;
                    Ok(c)
                }
                None => Err(self.fail(if plural {
                    "adjective or plural noun"
                } else {
                    "adjective or noun"
                })),
            };
        }
    }

    fn direction(&mut self) -> Option<Direction> {
        let d = match self.peek()? {
            "left" => Direction::Left,
            "right" => Direction::Right,
            "above" => Direction::Above,
            "below" => Direction::Below,
            _ => return None,
        };
        self.pos += 1;
        if matches!(d, Direction::Left | Direction::Right) && self.word("of").is_err() {
            self.pos -= 1;
            return None;
        }
        Some(d)
    }
}

fn related(subject: Constraints, dir: Direction, referent: Constraints) -> SetExpr {
    let relate = SetExpr::Relate(dir, Box::new(SetExpr::Select(referent)));
    if subject.is_empty() {
        relate
    } else {
        SetExpr::Filter(subject, Box::new(relate))
    }
}

/// Translates a template-language question. Unmatched input yields a
/// translation error carrying the tokens and the failing position.
pub fn translate_question<S: AsRef<str>>(question: &[S]) -> Result<Program, ProgramError> {
    let tokens: Vec<&str> = question.iter().map(AsRef::as_ref).collect();
    let mut c = Cursor {
        tokens: &tokens,
        pos: 0,
    };
    let program = match c.peek() {
        Some("what") => {
            c.pos += 1;
            let attr = c.attr()?;
            c.word("is")?;
            c.word("the")?;
            let subject = c.description(false)?;
            if c.peek().is_none() {
                Program::Query(attr, SetExpr::Select(subject))
            } else {
                let dir = c
                    .direction()
                    .ok_or_else(|| c.fail("direction or end of question"))?;
                c.word("the")?;
                let referent = c.description(false)?;
                Program::Query(attr, related(subject, dir, referent))
            }
        }
        Some("is") => {
            c.pos += 1;
            match c.peek() {
                Some("there") => {
                    c.pos += 1;
                    c.word("a")?;
                    Program::Exist(SetExpr::Select(c.description(false)?))
                }
                Some("the") => {
                    c.pos += 1;
                    let subject = c.description(false)?;
                    let dir = c.direction().ok_or_else(|| c.fail("direction"))?;
                    c.word("the")?;
                    let referent = c.description(false)?;
                    Program::Exist(related(subject, dir, referent))
                }
                _ => return Err(c.fail("\"there\" or \"the\"")),
            }
        }
        Some("do") => {
            c.pos += 1;
            c.word("the")?;
            let left = c.description(false)?;
            c.word("and")?;
            c.word("the")?;
            let right = c.description(false)?;
            for w in ["have", "the", "same"] {
                c.word(w)?;
            }
            let attr = c.attr()?;
            Program::CompareAttr(attr, SetExpr::Select(left), SetExpr::Select(right))
        }
        Some("how") => {
            c.pos += 1;
            c.word("many")?;
            let desc = c.description(true)?;
            c.word("are")?;
            c.word("there")?;
            Program::Count(SetExpr::Select(desc))
        }
        _ => return Err(c.fail("question head (what | is | do | how)")),
    };
    c.end()?;
    Ok(program)
}
