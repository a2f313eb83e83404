use serde::{Deserialize, Serialize};

use super::ProgramError;
use crate::world::{Attribute, Color, Material, SceneObject, Shape, SizeClass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrType {
    Shape,
    Color,
    Size,
    Material,
}

impl AttrType {
    pub const ALL: [AttrType; 4] = [
        AttrType::Shape,
        AttrType::Color,
        AttrType::Size,
        AttrType::Material,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttrType::Shape => "shape",
            AttrType::Color => "color",
            AttrType::Size => "size",
            AttrType::Material => "material",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == word)
    }

    /// Key token used inside `select`/`filter`, e.g. `color=`.
    pub fn key(self) -> &'static str {
        match self {
            AttrType::Shape => "shape=",
            AttrType::Color => "color=",
            AttrType::Size => "size=",
            AttrType::Material => "material=",
        }
    }

    pub fn value_of(self, obj: &SceneObject) -> &'static str {
        match self {
            AttrType::Shape => obj.shape.name(),
            AttrType::Color => obj.color.name(),
            AttrType::Size => obj.size.name(),
            AttrType::Material => obj.material.name(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Above,
        Direction::Below,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }

    pub fn parse(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.name() == word)
    }
}

/// Conjunction of optional attribute equalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Constraints {
    pub shape: Option<Shape>,
    pub color: Option<Color>,
    pub size: Option<SizeClass>,
    pub material: Option<Material>,
}

impl Constraints {
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn len(&self) -> usize {
        usize::from(self.shape.is_some())
            + usize::from(self.color.is_some())
            + usize::from(self.size.is_some())
            + usize::from(self.material.is_some())
    }

    pub fn matches(&self, o: &SceneObject) -> bool {
        self.shape.is_none_or(|v| v == o.shape)
            && self.color.is_none_or(|v| v == o.color)
            && self.size.is_none_or(|v| v == o.size)
            && self.material.is_none_or(|v| v == o.material)
    }

    pub fn has(&self, attr: AttrType) -> bool {
        match attr {
            AttrType::Shape => self.shape.is_some(),
            AttrType::Color => self.color.is_some(),
            AttrType::Size => self.size.is_some(),
            AttrType::Material => self.material.is_some(),
        }
    }

    /// Copies `attr` from `obj`.
    pub fn with_from(mut self, attr: AttrType, obj: &SceneObject) -> Self {
        match attr {
            AttrType::Shape => self.shape = Some(obj.shape),
            AttrType::Color => self.color = Some(obj.color),
            AttrType::Size => self.size = Some(obj.size),
            AttrType::Material => self.material = Some(obj.material),
        }
        self
    }

    /// Sets `attr` from its value word; `false` if the word is not a value
    /// of that attribute.
    pub fn set_word(&mut self, attr: AttrType, word: &str) -> bool {
        match attr {
            AttrType::Shape => Shape::parse(word).map(|v| self.shape = Some(v)).is_some(),
            AttrType::Color => Color::parse(word).map(|v| self.color = Some(v)).is_some(),
            AttrType::Size => SizeClass::parse(word)
                .map(|v| self.size = Some(v))
                .is_some(),
            AttrType::Material => Material::parse(word)
                .map(|v| self.material = Some(v))
                .is_some(),
        }
    }

    /// `(key, value)` pairs in canonical order: size, color, material, shape.
    pub fn pairs(&self) -> Vec<(AttrType, &'static str)> {
        let mut out = Vec::with_capacity(4);
        if let Some(v) = self.size {
            out.push((AttrType::Size, v.name()));
        }
        if let Some(v) = self.color {
            out.push((AttrType::Color, v.name()));
        }
        if let Some(v) = self.material {
            out.push((AttrType::Material, v.name()));
        }
        if let Some(v) = self.shape {
            out.push((AttrType::Shape, v.name()));
        }
        out
    }
}

/// Expressions that evaluate to object sets. Every leaf is a `Select`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum SetExpr {
    Select(Constraints),
    Filter(Constraints, Box<SetExpr>),
    /// Objects standing in `Direction` relative to the singleton referent.
    Relate(Direction, Box<SetExpr>),
}

/// Root of a program.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Program {
    Exist(SetExpr),
    Query(AttrType, SetExpr),
    CompareAttr(AttrType, SetExpr, SetExpr),
    Count(SetExpr),
}

impl SetExpr {
    fn write(&self, out: &mut Vec<String>) {
        out.push("(".into());
        match self {
            SetExpr::Select(c) => {
                out.push("select".into());
                write_constraints(c, out);
            }
            SetExpr::Filter(c, inner) => {
                out.push("filter".into());
                write_constraints(c, out);
                inner.write(out);
            }
            SetExpr::Relate(d, inner) => {
                out.push("relate".into());
                out.push(d.name().into());
                inner.write(out);
            }
        }
        out.push(")".into());
    }
}

fn write_constraints(c: &Constraints, out: &mut Vec<String>) {
    for (attr, value) in c.pairs() {
        out.push(attr.key().into());
        out.push(value.into());
    }
}

impl Program {
    /// Canonical S-expression tokens, e.g. `( query color ( select shape= cube ) )`.
    pub fn serialize(&self) -> Vec<String> {
        let mut out = vec!["(".to_string()];
        match self {
            Program::Exist(s) => {
                out.push("exist".into());
                s.write(&mut out);
            }
            Program::Query(a, s) => {
                out.push("query".into());
                out.push(a.name().into());
                s.write(&mut out);
            }
            Program::CompareAttr(a, l, r) => {
                out.push("compare_attr".into());
                out.push(a.name().into());
                l.write(&mut out);
                r.write(&mut out);
            }
            Program::Count(s) => {
                out.push("count".into());
                s.write(&mut out);
            }
        }
        out.push(")".into());
        out
    }

    pub fn to_text(&self) -> String {
        self.serialize().join(" ")
    }

    pub fn parse_text(text: &str) -> Result<Self, ProgramError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        parse_program(&tokens)
    }
}

struct Parser<'a> {
    tokens: &'a [&'a str],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> ProgramError {
        ProgramError::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).copied()
    }

    fn next(&mut self) -> Result<&'a str, ProgramError> {
        let t = self
            .peek()
            .ok_or_else(|| self.err("unexpected end of program"))?;
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, want: &str) -> Result<(), ProgramError> {
        match self.peek() {
            Some(t) if t == want => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(self.err(format!("expected {want:?}, found {t:?}"))),
            None => Err(self.err(format!("expected {want:?}, found end of program"))),
        }
    }

    fn attr_type(&mut self) -> Result<AttrType, ProgramError> {
        match self.peek() {
            Some(t) => match AttrType::parse(t) {
                Some(a) => {
                    self.pos += 1;
                    Ok(a)
                }
                None => Err(self.err(format!("expected attribute type, found {t:?}"))),
            },
            None => Err(self.err("expected attribute type, found end of program")),
        }
    }

    fn constraints(&mut self) -> Result<Constraints, ProgramError> {
        let mut c = Constraints::default();
        while let Some(key) = self.peek() {
            let Some(attr) = AttrType::ALL.into_iter().find(|a| a.key() == key) else {
                break;
            };
            if c.has(attr) {
                return Err(self.err(format!("duplicate constraint {key}")));
            }
            self.pos += 1;
            let value = self.next()?;
            if !c.set_word(attr, value) {
                self.pos -= 1;
                return Err(self.err(format!("{value:?} is not a {} value", attr.name())));
            }
        }
        Ok(c)
    }

    fn set_expr(&mut self) -> Result<SetExpr, ProgramError> {
        self.expect("(")?;
        let head_pos = self.pos;
        let expr = match self.next()? {
            "select" => SetExpr::Select(self.constraints()?),
            "filter" => {
                let c = self.constraints()?;
                if c.is_empty() {
                    return Err(self.err("filter needs at least one constraint"));
                }
                SetExpr::Filter(c, Box::new(self.set_expr()?))
            }
            "relate" => {
                let word = self.next()?;
                let d = Direction::parse(word).ok_or_else(|| ProgramError::Parse {
                    position: self.pos - 1,
                    message: format!("unknown direction {word:?}"),
                })?;
                SetExpr::Relate(d, Box::new(self.set_expr()?))
            }
            other => {
                return Err(ProgramError::Parse {
                    position: head_pos,
                    message: format!("unknown set operator {other:?}"),
                })
            }
        };
        self.expect(")")?;
        Ok(expr)
    }

    fn program(&mut self) -> Result<Program, ProgramError> {
        self.expect("(")?;
        let head_pos = self.pos;
        let p = match self.next()? {
            "exist" => Program::Exist(self.set_expr()?),
            "count" => Program::Count(self.set_expr()?),
            "query" => {
                let a = self.attr_type()?;
                Program::Query(a, self.set_expr()?)
            }
            "compare_attr" => {
                let a = self.attr_type()?;
                let l = self.set_expr()?;
                Program::CompareAttr(a, l, self.set_expr()?)
            }
            other => {
                return Err(ProgramError::Parse {
                    position: head_pos,
                    message: format!("unknown root {other:?}"),
                })
            }
        };
        self.expect(")")?;
        if let Some(t) = self.peek() {
            return Err(self.err(format!("trailing token {t:?}")));
        }
        Ok(p)
    }
}

/// Parses canonical program tokens. Errors carry the token position.
pub fn parse_program<S: AsRef<str>>(tokens: &[S]) -> Result<Program, ProgramError> {
    let refs: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    Parser {
        tokens: &refs,
        pos: 0,
    }
    .program()
}

pub fn serialize_program(p: &Program) -> Vec<String> {
    p.serialize()
}

impl Serialize for Program {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_text())
    }
}

impl<'de> Deserialize<'de> for Program {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        Program::parse_text(&text).map_err(serde::de::Error::custom)
    }
}
