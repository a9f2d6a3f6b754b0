//! Turns a scene and a task into one instruction/response record by filling
//! a sampled template's placeholders from ground truth.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::serialize_spatial;
use crate::scene::{location_phrase, Scene, SceneConfig, VisualObject};
use crate::templates::{template_id, templates_for, Task};

use super::GenError;

/// A filled template: instruction text, target response, provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionRecord {
    pub template_id: String,
    pub instruction: String,
    pub response: String,
    pub scene_id: String,
}

/// The box fragment used inside instructions, e.g.
/// `⟨Bbox⟩(0.34, 0.33),(0.64, 0.73)⟨/Box⟩` — the serialized block without
/// its outer framing.
fn bbox_fragment(obj: &VisualObject) -> String {
    let block = serialize_spatial(std::slice::from_ref(obj));
    block
        .strip_prefix("\u{27e8}br\u{27e9}")
        .and_then(|s| s.strip_suffix("\u{27e8}/br\u{27e9}"))
        .and_then(|s| s.split("\u{27e8}Bbox\u{27e9}").nth(1))
        .map(|s| format!("\u{27e8}Bbox\u{27e9}{s}"))
        .expect("canonical block always contains a box fragment")
}

/// Uniformly samples one of the task's templates and fills it.
pub fn expand_template(
    task: Task,
    scene: &Scene,
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<InstructionRecord, GenError> {
    let index = rng.gen_range(0..templates_for(task).len());
    expand_template_with(task, index, scene, config, rng)
}

/// Fills a specific template of the task; the rng only drives the choice of
/// object, question and option order.
pub fn expand_template_with(
    task: Task,
    index: usize,
    scene: &Scene,
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<InstructionRecord, GenError> {
    let template = templates_for(task)[index];
    let missing = |what: &'static str| GenError::MissingSceneData {
        scene: scene.id.clone(),
        task: task.name(),
        what,
    };
    let pick_object = |rng: &mut ChaCha8Rng| -> Result<&VisualObject, GenError> {
        if scene.objects.is_empty() {
            return Err(missing("objects"));
        }
        Ok(&scene.objects[rng.gen_range(0..scene.objects.len())])
    };

    let (instruction, response) = match task {
        Task::ImageCaptioning => (template.to_string(), scene.caption.clone()),

        Task::Vqa => {
            if scene.qa.is_empty() {
                return Err(missing("qa pairs"));
            }
            let qa = &scene.qa[rng.gen_range(0..scene.qa.len())];
            (template.replace("{Question}", &qa.question), qa.answer.clone())
        }

        Task::GroundedCaptioning => {
            // The "highlighted" object is the largest one, a fixed rule.
            let target = scene
                .objects
                .iter()
                .max_by(|a, b| a.bbox.area().total_cmp(&b.bbox.area()))
                .ok_or_else(|| missing("objects"))?;
            (template.to_string(), format!("a {} {}", config.color_of(&target.tag), target.tag))
        }

        Task::Rec => {
            let obj = pick_object(rng)?;
            let instruction = template
                .replace("{Tag}", &obj.tag)
                .replace("{Bbox}", &bbox_fragment(obj));
            // Box-eliciting templates answer with the serialized block;
            // confirmation templates ({Bbox} in the instruction) with yes.
            let response = if template.contains("{Bbox}") {
                "yes".to_string()
            } else {
                serialize_spatial(std::slice::from_ref(obj))
            };
            (instruction, response)
        }

        Task::ReferentialDialogue => {
            let obj = pick_object(rng)?;
            let tag_and_box = format!("{} {}", obj.tag, bbox_fragment(obj));
            if template.contains("{Question}") {
                // Questions about the referred object with ground-truth
                // answers derived from the palette or the box.
                let (q, a) = if rng.gen_bool(0.5) {
                    (format!("what color is the {}?", obj.tag), config.color_of(&obj.tag).to_string())
                } else {
                    (format!("where is the {} in the image?", obj.tag), location_phrase(&obj.bbox))
                };
                (template.replace("{Tag & Bbox}", &tag_and_box).replace("{Question}", &q), a)
            } else {
                (
                    template.replace("{Tag & Bbox}", &tag_and_box),
                    format!("a {} {}", config.color_of(&obj.tag), obj.tag),
                )
            }
        }

        Task::MultiChoiceVqa => {
            let obj = pick_object(rng)?;
            let correct = config.color_of(&obj.tag).to_string();
            let mut options: Vec<&str> = config.colors.iter().map(|c| c.as_str()).filter(|c| **c != correct).collect();
            // Deterministic distractor draw, then the correct answer at a
            // random slot.
            for i in (1..options.len()).rev() {
                options.swap(i, rng.gen_range(0..=i));
            }
            options.truncate(3);
            options.insert(rng.gen_range(0..=3), &correct);
            let letters = ["a", "b", "c", "d"];
            let rendered: Vec<String> =
                options.iter().zip(letters).map(|(o, l)| format!("({l}) {o}")).collect();
            let question = format!("what color is the {}?", obj.tag);
            (
                template.replace("{Question}", &question).replace("{Option}", &rendered.join(" ")),
                correct,
            )
        }
    };

    debug_assert!(!instruction.contains('{'), "unresolved placeholder in {instruction:?}");
    Ok(InstructionRecord {
        template_id: template_id(task, index),
        instruction,
        response,
        scene_id: scene.id.clone(),
    })
}
