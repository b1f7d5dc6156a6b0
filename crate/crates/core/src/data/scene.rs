use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: String,
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: u32,
    pub predicate: String,
    pub object: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneGraph {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(Error::Graph(format!("duplicate object id {}", o.id)));
            }
        }
        for r in &self.relations {
            for end in [r.subject, r.object] {
                if !ids.contains(&end) {
                    return Err(Error::Graph(format!(
                        "relation `{}` references missing object {end}",
                        r.predicate
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn find_category(&self, category: &str) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.category == category)
    }
}

/// The reverse reading of a spatial predicate, if it has one.
pub fn converse_predicate(predicate: &str) -> Option<&'static str> {
    match predicate {
        "to the left of" => Some("to the right of"),
        "to the right of" => Some("to the left of"),
        "above" => Some("below"),
        "below" => Some("above"),
        _ => None,
    }
}

fn phrase(o: &SceneObject) -> String {
    let mut words = vec!["the"];
    words.extend(o.attributes.iter().map(String::as_str));
    words.push(&o.category);
    words.join(" ")
}

/// Template rendering of a scene graph.
///
/// Objects are visited in id order; each contributes one clause
/// `"{subject} is {predicate} {object}"` per relation it is the subject of
/// (ordered by object id, then predicate), or its bare phrase
/// `"the {attributes..} {category}"` when it takes part in no relation.
/// Clauses are joined with `"; "`.
pub fn render_caption(graph: &SceneGraph) -> Result<String> {
    graph.validate()?;
    let by_id: BTreeMap<u32, &SceneObject> = graph.objects.iter().map(|o| (o.id, o)).collect();
    let involved: BTreeSet<u32> = graph
        .relations
        .iter()
        .flat_map(|r| [r.subject, r.object])
        .collect();
    let mut clauses = Vec::new();
    for (&id, obj) in &by_id {
        let mut own: Vec<&crate::data::Relation> =
            graph.relations.iter().filter(|r| r.subject == id).collect();
        own.sort_by(|a, b| {
            a.object
                .cmp(&b.object)
                .then_with(|| a.predicate.cmp(&b.predicate))
        });
        for r in own {
            clauses.push(format!(
                "{} is {} {}",
                phrase(obj),
                r.predicate,
                phrase(by_id[&r.object])
            ));
        }
        if !involved.contains(&id) {
            clauses.push(phrase(obj));
        }
    }
    Ok(clauses.join("; "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(id: u32, category: &str, attrs: &[&str]) -> SceneObject {
        SceneObject {
            id,
            category: category.into(),
            attributes: attrs.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn red_book_on_desk() {
        let g = SceneGraph {
            objects: vec![obj(0, "book", &["red"]), obj(1, "desk", &[])],
            relations: vec![Relation {
                subject: 0,
                predicate: "on".into(),
                object: 1,
            }],
        };
        assert_eq!(render_caption(&g).unwrap(), "the red book is on the desk");
    }

    #[test]
    fn single_object() {
        let g = SceneGraph {
            objects: vec![obj(3, "dog", &[])],
            relations: vec![],
        };
        assert_eq!(render_caption(&g).unwrap(), "the dog");
    }

    #[test]
    fn listing_order_does_not_matter() {
        let a = SceneGraph {
            objects: vec![
                obj(0, "cup", &["blue"]),
                obj(1, "box", &["red"]),
                obj(2, "ball", &[]),
            ],
            relations: vec![
                Relation {
                    subject: 1,
                    predicate: "above".into(),
                    object: 0,
                },
                Relation {
                    subject: 0,
                    predicate: "to the left of".into(),
                    object: 1,
                },
            ],
        };
        let mut b = a.clone();
        b.objects.reverse();
        b.relations.reverse();
        let ca = render_caption(&a).unwrap();
        assert_eq!(ca, render_caption(&b).unwrap());
        assert_eq!(
            ca,
            "the blue cup is to the left of the red box; the red box is above the blue cup; the ball"
        );
    }

    #[test]
    fn dangling_relation_is_an_error() {
        let g = SceneGraph {
            objects: vec![obj(0, "cup", &[])],
            relations: vec![Relation {
                subject: 0,
                predicate: "on".into(),
                object: 9,
            }],
        };
        assert!(matches!(render_caption(&g), Err(Error::Graph(_))));
    }

    #[test]
    fn duplicate_ids_are_an_error() {
        let g = SceneGraph {
            objects: vec![obj(0, "cup", &[]), obj(0, "box", &[])],
            relations: vec![],
        };
        assert!(g.validate().is_err());
    }
}
