//! Synthetic text: task instructions, reference answers derived from posture
//! labels and maps, and a small posture-health knowledge corpus.

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::pressure::{self, PressureMap, PressureStats};
use crate::prompt::TaskType;
use crate::rng::{self, Rng};

const INSTRUCTIONS: [(TaskType, &[&str]); 4] = [
    (
        TaskType::Description,
        &[
            "describe the sitting posture shown by this pressure map.",
            "summarize how pressure is spread across the seat.",
            "what does this seat pressure reading show?",
        ],
    ),
    (
        TaskType::Analysis,
        &[
            "what health risks does this sitting posture carry?",
            "analyze this pressure distribution for possible problems.",
            "is this way of sitting harmful over a long day?",
        ],
    ),
    (
        TaskType::Correction,
        &[
            "how should this person adjust their posture?",
            "suggest a correction for this sitting position.",
            "what change would make this posture healthier?",
        ],
    ),
    (
        TaskType::Question,
        &[
            "which part of the seat carries the most weight?",
            "is the weight shared evenly between both sides?",
            "where is the pressure concentrated?",
        ],
    ),
];

pub fn instructions(task: TaskType) -> &'static [&'static str] {
    INSTRUCTIONS.iter().find(|(t, _)| *t == task).map(|(_, v)| *v).unwrap_or(&[])
}

pub fn random_instruction(task: TaskType, rng: &mut Rng) -> String {
    instructions(task).choose(rng).copied().unwrap_or("describe the posture.").to_string()
}

struct PostureText {
    key: &'static str,
    risk: &'static str,
    fix: &'static str,
}

const FORE_AFT_TEXT: [PostureText; 4] = [
    PostureText {
        key: "upright",
        risk: "an upright posture spreads load over both sitting bones and keeps the spine neutral, so the risk is low",
        fix: "keep the current upright position and take a short standing break every half hour",
    },
    PostureText {
        key: "forward-lean",
        risk: "leaning forward loads the thighs and flexes the lower back, which strains the lumbar discs over time",
        fix: "slide the hips back until the pelvis touches the backrest and bring the screen closer",
    },
    PostureText {
        key: "reclined",
        risk: "a reclined posture piles weight onto the tailbone and rounds the lower back",
        fix: "raise the backrest angle and sit on the sitting bones rather than the tailbone",
    },
    PostureText {
        key: "perched on the front edge",
        risk: "perching on the front edge presses on the back of the thighs and can reduce blood flow to the legs",
        fix: "move back into the seat so the thighs are supported and both feet rest flat on the floor",
    },
];

const LATERAL_TEXT: [PostureText; 3] = [
    PostureText {
        key: "balanced",
        risk: "the load is shared evenly between the left and right sides",
        fix: "weight is already even between the sides",
    },
    PostureText {
        key: "left-weighted",
        risk: "shifting weight to the left side tilts the pelvis and can strain the right side of the lower back",
        fix: "move weight back onto the right sitting bone and uncross the legs",
    },
    PostureText {
        key: "right-weighted",
        risk: "shifting weight to the right side tilts the pelvis and can strain the left side of the lower back",
        fix: "move weight back onto the left sitting bone and uncross the legs",
    },
];

fn split_label(label: &str) -> (Option<&'static PostureText>, Option<&'static PostureText>) {
    let (fa, lat) = label.rsplit_once(", ").unwrap_or((label, ""));
    (
        FORE_AFT_TEXT.iter().find(|t| t.key == fa),
        LATERAL_TEXT.iter().find(|t| t.key == lat),
    )
}

/// Reference answer for `task` given the posture label and the measured map.
pub fn reference_answer(task: TaskType, label: &str, map: &PressureMap, stats: &PressureStats) -> String {
    let (fa, lat) = split_label(label);
    match task {
        TaskType::Description => pressure::template_annotation(map, stats, Some(label)),
        TaskType::Analysis => match (fa, lat) {
            (Some(fa), Some(lat)) => format!("{}. {}.", fa.risk, lat.risk),
            _ => "the posture could not be classified, so no specific risk is flagged.".into(),
        },
        TaskType::Correction => match (fa, lat) {
            (Some(fa), Some(lat)) => format!("{}. {}.", fa.fix, lat.fix),
            _ => "sit back in the seat with both feet flat on the floor.".into(),
        },
        TaskType::Question => {
            let sums = pressure::quadrant_sums(map);
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
            let balance = match pressure::left_right_ratio(map) {
                Some(r) if r > 1.05 => "more on the left",
                Some(r) if r < 1.0 / 1.05 => "more on the right",
                Some(_) => "even between the sides",
                None => "absent",
            };
            format!(
                "most weight rests on the {} region, then the {} region, and the load is {}.",
                pressure::QUADRANTS[order[0]],
                pressure::QUADRANTS[order[1]],
                balance
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub instruction: String,
    pub answer: String,
}

const GENERAL_FACTS: [(&str, &str); 10] = [
    (
        "how long can a person sit without a break?",
        "most guidance suggests standing or walking for a few minutes every thirty to sixty minutes of sitting.",
    ),
    (
        "why does uneven seat pressure matter?",
        "uneven pressure tilts the pelvis, which bends the spine sideways and loads one side of the lower back.",
    ),
    (
        "what is a healthy seat pressure pattern?",
        "a healthy pattern shows two similar peaks under the sitting bones and moderate, even pressure under the thighs.",
    ),
    (
        "what causes pressure under the tailbone?",
        "slouching or reclining rolls the pelvis backward so weight shifts from the sitting bones onto the tailbone.",
    ),
    (
        "how does crossing the legs affect the seat pressure?",
        "crossing the legs lifts one thigh and shifts weight to the opposite sitting bone.",
    ),
    (
        "what seat height is recommended?",
        "the seat should let the feet rest flat with the knees level with or slightly below the hips.",
    ),
    (
        "can high thigh pressure cause problems?",
        "strong pressure behind the thighs can compress blood vessels and nerves and lead to numbness in the legs.",
    ),
    (
        "what does a backrest do for posture?",
        "a backrest carries part of the upper body weight and helps keep the natural curve of the lower back.",
    ),
    (
        "why do people slide forward on the seat?",
        "people slide forward when the seat is too deep or when they lean toward a screen that is too far away.",
    ),
    (
        "what is the risk of sitting still for hours?",
        "long static sitting reduces circulation and lets muscles stiffen, raising the chance of back and neck pain.",
    ),
];

/// Deterministic knowledge corpus of `n` records mixing general facts with
/// posture-specific risk and correction entries.
pub fn knowledge_corpus(n: usize, seed: u64) -> Vec<KnowledgeRecord> {
    let mut pool: Vec<KnowledgeRecord> = GENERAL_FACTS
        .iter()
        .map(|(i, a)| KnowledgeRecord {
            instruction: (*i).into(),
            answer: (*a).into(),
        })
        .collect();
    for t in FORE_AFT_TEXT.iter().chain(LATERAL_TEXT.iter()) {
        pool.push(KnowledgeRecord {
            instruction: format!("what are the risks of a {} sitting posture?", t.key),
            answer: format!("{}.", t.risk),
        });
        pool.push(KnowledgeRecord {
            instruction: format!("how can a {} sitting posture be corrected?", t.key),
            answer: format!("{}.", t.fix),
        });
    }
    let mut rng = rng::stream(seed, &[0x6b62]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        out.extend(order.into_iter().take(n - out.len()).map(|i| pool[i].clone()));
    }
    out
}

/// Plain-text documents for backbone pretraining.
pub fn pretraining_texts(n: usize, seed: u64) -> Vec<String> {
    knowledge_corpus(n, seed)
        .into_iter()
        .map(|r| format!("{}\n{}", r.instruction, r.answer))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pressure::{compute_stats, random_posture, synth_posture, SensorGeometry};

    #[test]
    fn every_task_has_instructions() {
        for t in TaskType::ALL {
            assert!(!instructions(t).is_empty());
        }
    }

    #[test]
    fn answers_follow_the_label() {
        let g = SensorGeometry::default();
        let spec = random_posture(&g, &mut rng::seeded(4));
        let map = synth_posture(&spec, &g, 4).unwrap();
        let st = compute_stats(&map);
        let (fa, lat) = spec.posture_label.rsplit_once(", ").unwrap();
        let analysis = reference_answer(TaskType::Analysis, &spec.posture_label, &map, &st);
        assert!(analysis.contains(split_label(&spec.posture_label).0.unwrap().risk), "{fa} {lat}");
        let q = reference_answer(TaskType::Question, &spec.posture_label, &map, &st);
        assert!(q.starts_with("most weight rests on the"));
    }

    #[test]
    fn knowledge_corpus_is_deterministic() {
        let a = knowledge_corpus(40, 9);
        assert_eq!(a.len(), 40);
        assert_eq!(a, knowledge_corpus(40, 9));
        assert_ne!(a, knowledge_corpus(40, 10));
    }
}
