use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::exec::{eval_set, execute_program};
use super::translate::{render_description, render_direction};
use super::{AttrType, Constraints, Direction, Program, ProgramError, SetExpr};
use crate::world::{Color, Material, SceneGraph, Shape, SizeClass};

/// Question templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    /// "what color is the cube"
    T1,
    /// "is there a red sphere"
    T2,
    /// "is the cube left of the sphere"
    T3,
    /// "what color is the object left of the red cube"
    T4,
    /// "do the cube and the sphere have the same color"
    T5,
    /// "how many red objects are there"
    T6,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::T1,
        Template::T2,
        Template::T3,
        Template::T4,
        Template::T5,
        Template::T6,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["T1", "T2", "T3", "T4", "T5", "T6"][self.index()]
    }

    /// Templates whose answer depends on object positions.
    pub fn is_spatial(self) -> bool {
        matches!(self, Template::T3 | Template::T4)
    }

    /// Templates that chain two reasoning steps over two objects.
    pub fn is_multi_step(self) -> bool {
        matches!(self, Template::T4 | Template::T5)
    }
}

/// A question with its program and oracle answer.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedQuestion {
    pub template: Template,
    pub question: Vec<String>,
    pub program: Program,
    pub answer: String,
}

const ATTEMPTS: usize = 24;

fn subsets(attrs: &[AttrType]) -> Vec<Vec<AttrType>> {
    (1u32..(1 << attrs.len()))
        .map(|mask| {
            attrs
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, a)| *a)
                .collect()
        })
        .collect()
}

/// Descriptions built from `obj`'s own attributes (never using `excluded`)
/// that select exactly that object.
pub fn unique_descriptions(
    scene: &SceneGraph,
    obj: usize,
    excluded: &[AttrType],
) -> Vec<Constraints> {
    let allowed: Vec<AttrType> = AttrType::ALL
        .into_iter()
        .filter(|a| !excluded.contains(a))
        .collect();
    subsets(&allowed)
        .into_iter()
        .map(|attrs| {
            attrs.iter().fold(Constraints::default(), |c, &a| {
                c.with_from(a, &scene.objects[obj])
            })
        })
        .filter(|c| eval_set(&SetExpr::Select(*c), scene).is_ok_and(|s| s == [obj]))
        .collect()
}

fn random_constraints<R: Rng>(rng: &mut R, attrs: &[AttrType]) -> Constraints {
    let mut c = Constraints::default();
    for &a in attrs {
        match a {
            AttrType::Shape => c.shape = Some(*Shape::ALL.choose(rng).unwrap()),
            AttrType::Color => c.color = Some(*Color::ALL.choose(rng).unwrap()),
            AttrType::Size => c.size = Some(*SizeClass::ALL.choose(rng).unwrap()),
            AttrType::Material => c.material = Some(*Material::ALL.choose(rng).unwrap()),
        }
    }
    c
}

fn words(parts: &[&[&str]]) -> Vec<String> {
    parts
        .iter()
        .flat_map(|p| p.iter().map(|s| s.to_string()))
        .collect()
}

fn pick_unique<R: Rng>(
    rng: &mut R,
    scene: &SceneGraph,
    obj: usize,
    excluded: &[AttrType],
) -> Option<Constraints> {
    unique_descriptions(scene, obj, excluded)
        .choose(rng)
        .copied()
}

fn attempt<R: Rng>(
    scene: &SceneGraph,
    template: Template,
    rng: &mut R,
) -> Option<(Vec<String>, Program)> {
    let n = scene.objects.len();
    if n == 0 {
        return None;
    }
    match template {
        Template::T1 => {
            let obj = rng.gen_range(0..n);
            let attr = *AttrType::ALL.choose(rng).unwrap();
            let desc = pick_unique(rng, scene, obj, &[attr])?;
            let q = words(&[
                &["what", attr.name(), "is", "the"],
                &render_description(&desc, false),
            ]);
            Some((q, Program::Query(attr, SetExpr::Select(desc))))
        }
        Template::T2 => {
            let k = rng.gen_range(1..=2);
            let attrs: Vec<AttrType> = AttrType::ALL.choose_multiple(rng, k).copied().collect();
            let desc = if rng.gen_bool(0.5) {
                let obj = &scene.objects[rng.gen_range(0..n)];
                attrs
                    .iter()
                    .fold(Constraints::default(), |c, &a| c.with_from(a, obj))
            } else {
                // Negative case: constraints nothing in the scene satisfies.
                (0..ATTEMPTS)
                    .map(|_| random_constraints(rng, &attrs))
                    .find(|c| !scene.objects.iter().any(|o| c.matches(o)))?
            };
            let q = words(&[&["is", "there", "a"], &render_description(&desc, false)]);
            Some((q, Program::Exist(SetExpr::Select(desc))))
        }
        Template::T3 => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let (a, b) = (idx[0], *idx.get(1)?);
            let dir = *Direction::ALL.choose(rng).unwrap();
            let da = pick_unique(rng, scene, a, &[])?;
            let db = pick_unique(rng, scene, b, &[])?;
            let q = words(&[
                &["is", "the"],
                &render_description(&da, false),
                render_direction(dir),
                &["the"],
                &render_description(&db, false),
            ]);
            let relate = SetExpr::Relate(dir, Box::new(SetExpr::Select(db)));
            Some((q, Program::Exist(SetExpr::Filter(da, Box::new(relate)))))
        }
        Template::T4 => {
            let dir = *Direction::ALL.choose(rng).unwrap();
            let candidates: Vec<usize> = (0..n)
                .filter(|&r| {
                    let rel =
                        SetExpr::Relate(dir, Box::new(SetExpr::Select(scene_singleton(scene, r))));
                    eval_set(&rel, scene).is_ok_and(|s| s.len() == 1)
                })
                .collect();
            let referent = *candidates.choose(rng)?;
            let desc = pick_unique(rng, scene, referent, &[])?;
            let attr = *AttrType::ALL.choose(rng).unwrap();
            let q = words(&[
                &["what", attr.name(), "is", "the", "object"],
                render_direction(dir),
                &["the"],
                &render_description(&desc, false),
            ]);
            let relate = SetExpr::Relate(dir, Box::new(SetExpr::Select(desc)));
            Some((q, Program::Query(attr, relate)))
        }
        Template::T5 => {
            let attr = *AttrType::ALL.choose(rng).unwrap();
            let mut pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
                .collect();
            if rng.gen_bool(0.5) {
                let same: Vec<(usize, usize)> = pairs
                    .iter()
                    .copied()
                    .filter(|&(a, b)| {
                        attr.value_of(&scene.objects[a]) == attr.value_of(&scene.objects[b])
                    })
                    .collect();
                if !same.is_empty() {
                    pairs = same;
                }
            }
            let &(a, b) = pairs.choose(rng)?;
            let da = pick_unique(rng, scene, a, &[attr])?;
            let db = pick_unique(rng, scene, b, &[attr])?;
            let q = words(&[
                &["do", "the"],
                &render_description(&da, false),
                &["and", "the"],
                &render_description(&db, false),
                &["have", "the", "same", attr.name()],
            ]);
            Some((
                q,
                Program::CompareAttr(attr, SetExpr::Select(da), SetExpr::Select(db)),
            ))
        }
        Template::T6 => {
            let k = rng.gen_range(0..=2);
            let attrs: Vec<AttrType> = AttrType::ALL.choose_multiple(rng, k).copied().collect();
            let desc = if rng.gen_bool(0.75) {
                let obj = &scene.objects[rng.gen_range(0..n)];
                attrs
                    .iter()
                    .fold(Constraints::default(), |c, &a| c.with_from(a, obj))
            } else {
                random_constraints(rng, &attrs)
            };
            let q = words(&[
                &["how", "many"],
                &render_description(&desc, true),
                &["are", "there"],
            ]);
            Some((q, Program::Count(SetExpr::Select(desc))))
        }
    }
}

/// Constraints matching one object on every attribute.
fn scene_singleton(scene: &SceneGraph, obj: usize) -> Constraints {
    AttrType::ALL
        .into_iter()
        .fold(Constraints::default(), |c, a| {
            c.with_from(a, &scene.objects[obj])
        })
}

/// Fills `template` on `scene`, resampling its free choices up to a fixed
/// number of times. Returns [`ProgramError::Skip`] when no instance with
/// unique referents exists.
pub fn gen_question<R: Rng>(
    scene: &SceneGraph,
    template: Template,
    rng: &mut R,
) -> Result<GeneratedQuestion, ProgramError> {
    for _ in 0..ATTEMPTS {
        let Some((question, program)) = attempt(scene, template, rng) else {
            continue;
        };
        let answer = match execute_program(&program, scene) {
            Ok(a) => a,
            Err(ProgramError::Ambiguous { .. }) => continue,
            Err(e) => return Err(e),
        };
        return Ok(GeneratedQuestion {
            template,
            question,
            program,
            answer,
        });
    }
    Err(ProgramError::Skip {
        template: template.name(),
        image_id: scene.image_id,
    })
}
