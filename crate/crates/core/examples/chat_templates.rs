//! Renders the same conversation with both templates and splits a
//! generation into thought and answer.

use mergecheck::chat_template::{render, strip_think, Message, TemplateId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let conv = [
        Message::system("You are a careful medical assistant."),
        Message::user("I have had a cough for three weeks."),
    ];
    for id in [TemplateId::Think, TemplateId::NoThink] {
        println!("--- {id} ---\n{}", render(&conv, id, true)?);
    }

    for text in [
        "<think>\nPersistent cough, consider TB.\n</think>\n\nPlease see a doctor for a chest X-ray.",
        "Please see a doctor.",
        "<think>Running out of tokens",
    ] {
        let s = strip_think(text);
        println!("{:?} -> thought={:?} answer={:?} wellformed={}", text, s.thought, s.answer, s.wellformed);
    }
    Ok(())
}
