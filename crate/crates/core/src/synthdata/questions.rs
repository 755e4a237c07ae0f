use rand::seq::IndexedRandom;
use rand::Rng;

use crate::rng::CounterRng;

use super::scene::{stream, Category, Scene, QUESTION_STREAM};
use super::QuestionType;

/// Every answer class the generator can emit, in class-index order.
pub const ANSWERS: [&str; 14] = [
    "yes", "no", "rural", "urban", "zero", "small", "medium", "large", "1", "2", "3", "4", "5-10", "11+",
];

/// What a question can be about: a single category or all buildings together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Subject {
    SmallBuildings,
    LargeBuildings,
    Buildings,
    Roads,
    Water,
    Trees,
    Fields,
}

impl Subject {
    pub const ALL: [Subject; 7] = [
        Subject::SmallBuildings,
        Subject::LargeBuildings,
        Subject::Buildings,
        Subject::Roads,
        Subject::Water,
        Subject::Trees,
        Subject::Fields,
    ];

    pub fn singular(self) -> &'static str {
        match self {
            Subject::SmallBuildings => "small building",
            Subject::LargeBuildings => "large building",
            Subject::Buildings => "building",
            Subject::Roads => "road",
            Subject::Water => "water area",
            Subject::Trees => "tree",
            Subject::Fields => "field",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Subject::SmallBuildings => "small buildings",
            Subject::LargeBuildings => "large buildings",
            Subject::Buildings => "buildings",
            Subject::Roads => "roads",
            Subject::Water => "water areas",
            Subject::Trees => "trees",
            Subject::Fields => "fields",
        }
    }

    pub fn count(self, scene: &Scene) -> usize {
        match self {
            Subject::SmallBuildings => scene.count(Category::BuildingSmall),
            Subject::LargeBuildings => scene.count(Category::BuildingLarge),
            Subject::Buildings => scene.count(Category::BuildingSmall) + scene.count(Category::BuildingLarge),
            Subject::Roads => scene.count(Category::Road),
            Subject::Water => scene.count(Category::Water),
            Subject::Trees => scene.count(Category::Tree),
            Subject::Fields => scene.count(Category::Field),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Question {
    pub text: String,
    pub answer: &'static str,
    pub qtype: QuestionType,
    pub subjects: Vec<Subject>,
}

pub(crate) fn count_answer(count: usize) -> &'static str {
    match count.min(16) {
        0 => "zero",
        1 => "1",
        2 => "2",
        3 => "3",
        4 => "4",
        5..=10 => "5-10",
        _ => "11+",
    }
}

pub(crate) fn area_answer(cells: usize) -> &'static str {
    match cells {
        0 => "zero",
        1..=4 => "small",
        5..=12 => "medium",
        _ => "large",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Ground-truth answer of a templated question from scene metadata.
pub fn answer_for(qtype: QuestionType, subjects: &[Subject], scene: &Scene) -> &'static str {
    match qtype {
        QuestionType::RuralUrban => {
            if scene.urban {
                "urban"
            } else {
                "rural"
            }
        }
        QuestionType::Presence => yes_no(subjects[0].count(scene) > 0),
        QuestionType::Comparison => yes_no(subjects[0].count(scene) > subjects[1].count(scene)),
        QuestionType::Count => count_answer(subjects[0].count(scene)),
        QuestionType::Area => area_answer(subjects[0].count(scene)),
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn make(qtype: QuestionType, subjects: Vec<Subject>, text: String, scene: &Scene) -> Question {
    Question { answer: answer_for(qtype, &subjects, scene), text: capitalize(&text), qtype, subjects }
}

/// Fills the templates for one scene. Presence and comparison questions pick their
/// subjects so that yes and no are equally likely whenever the scene allows both.
pub fn instantiate_questions(scene: &Scene, per_type_counts: &[usize; 5], seed: u64) -> Vec<Question> {
    let mut rng = CounterRng::new(seed, stream(scene.id, QUESTION_STREAM));
    let mut out = Vec::new();
    for qtype in QuestionType::ALL {
        for _ in 0..per_type_counts[qtype.index()] {
            let q = match qtype {
                QuestionType::RuralUrban => make(qtype, vec![], "is it a rural or an urban area?".into(), scene),
                QuestionType::Presence => {
                    let want = rng.random_bool(0.5);
                    let matching: Vec<Subject> = Subject::ALL.into_iter().filter(|s| (s.count(scene) > 0) == want).collect();
                    let pool = if matching.is_empty() { Subject::ALL.to_vec() } else { matching };
                    let s = *pool.choose(&mut rng).expect("non-empty pool");
                    make(qtype, vec![s], format!("is a {} present?", s.singular()), scene)
                }
                QuestionType::Comparison => {
                    let want = rng.random_bool(0.5);
                    let pairs: Vec<(Subject, Subject)> = Subject::ALL
                        .into_iter()
                        .flat_map(|a| Subject::ALL.into_iter().map(move |b| (a, b)))
                        .filter(|(a, b)| a != b)
                        .collect();
                    let matching: Vec<_> = pairs.iter().copied().filter(|(a, b)| (a.count(scene) > b.count(scene)) == want).collect();
                    let pool = if matching.is_empty() { pairs } else { matching };
                    let (a, b) = *pool.choose(&mut rng).expect("non-empty pool");
                    make(qtype, vec![a, b], format!("are there more {} than {}?", a.plural(), b.plural()), scene)
                }
                QuestionType::Count => {
                    let s = *Subject::ALL.choose(&mut rng).expect("subjects");
                    let text = if rng.random_bool(0.5) {
                        format!("what is the amount of {}?", s.plural())
                    } else {
                        format!("how many {} are there?", s.plural())
                    };
                    make(qtype, vec![s], text, scene)
                }
                QuestionType::Area => {
                    let s = *Subject::ALL.choose(&mut rng).expect("subjects");
                    make(qtype, vec![s], format!("what is the area covered by {}?", s.plural()), scene)
                }
            };
            out.push(q);
        }
    }
    out
}
