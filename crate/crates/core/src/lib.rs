pub mod audit;
pub mod chat_template;
pub mod cli;
pub mod guard;
pub mod lora;
pub mod tensor_store;
pub mod text_eval;
