use super::{answer_index, Direction, Program, ProgramError, SetExpr};
use crate::world::SceneGraph;

/// `true` iff `obj` lies strictly on side `dir` of `referent`, comparing
/// normalized centers (x for left/right, y for above/below, y grows downward).
pub fn in_direction(scene: &SceneGraph, obj: usize, referent: usize, dir: Direction) -> bool {
    let (ox, oy) = scene.norm_center(&scene.objects[obj]);
    let (rx, ry) = scene.norm_center(&scene.objects[referent]);
    match dir {
        Direction::Left => ox < rx,
        Direction::Right => ox > rx,
        Direction::Above => oy < ry,
        Direction::Below => oy > ry,
    }
}

fn singleton(set: &[usize], op: &'static str) -> Result<usize, ProgramError> {
    match set {
        [only] => Ok(*only),
        _ => Err(ProgramError::Ambiguous {
            op,
            size: set.len(),
        }),
    }
}

/// Indices (into `scene.objects`) of the objects `expr` selects.
pub fn eval_set(expr: &SetExpr, scene: &SceneGraph) -> Result<Vec<usize>, ProgramError> {
    match expr {
        SetExpr::Select(c) => Ok((0..scene.objects.len())
            .filter(|&i| c.matches(&scene.objects[i]))
            .collect()),
        SetExpr::Filter(c, inner) => Ok(eval_set(inner, scene)?
            .into_iter()
            .filter(|&i| c.matches(&scene.objects[i]))
            .collect()),
        SetExpr::Relate(dir, inner) => {
            let referent = singleton(&eval_set(inner, scene)?, "relate")?;
            Ok((0..scene.objects.len())
                .filter(|&i| in_direction(scene, i, referent, *dir))
                .collect())
        }
    }
}

fn yes_no(flag: bool) -> &'static str {
    if flag {
        "yes"
    } else {
        "no"
    }
}

/// Runs `program` on `scene` and returns its answer label.
pub fn execute_program(program: &Program, scene: &SceneGraph) -> Result<String, ProgramError> {
    let label = match program {
        Program::Exist(s) => yes_no(!eval_set(s, scene)?.is_empty()).to_string(),
        Program::Count(s) => eval_set(s, scene)?.len().to_string(),
        Program::Query(attr, s) => {
            let i = singleton(&eval_set(s, scene)?, "query")?;
            attr.value_of(&scene.objects[i]).to_string()
        }
        Program::CompareAttr(attr, l, r) => {
            let a = singleton(&eval_set(l, scene)?, "compare_attr")?;
            let b = singleton(&eval_set(r, scene)?, "compare_attr")?;
            yes_no(attr.value_of(&scene.objects[a]) == attr.value_of(&scene.objects[b])).to_string()
        }
    };
    if answer_index(&label).is_none() {
        return Err(ProgramError::OutOfVocabulary(label));
    }
    Ok(label)
}
