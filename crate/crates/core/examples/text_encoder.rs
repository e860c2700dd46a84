//! Tokenize queries and compare their embeddings from an untrained text
//! encoder. Word order changes the embedding through positional encodings.

use textdet::model::{Model, ModelConfig, Preset};
use textdet::nn::Session;
use textdet::text_encoder::{tokenize, Vocabulary};

fn main() -> textdet::Result<()> {
    let model = Model::<f32>::new(&ModelConfig::preset(Preset::Desk), Vocabulary::default(), 0)?;
    let queries = ["red circle", "circle red", "a red circle", "blue squares", "all shapes"];
    let mut embeddings = Vec::new();
    for q in queries {
        let tokens = tokenize(q, &model.vocab, model.config.text.max_len);
        let mut s = Session::new(&model.params, false);
        let e = model.text.encode(&mut s, &tokens)?;
        let v = s.graph.data(e).to_vec();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        println!("{q:>14}: ids {:?}, |e| = {norm:.6}", tokens.ids());
        embeddings.push(v);
    }
    println!("cosine similarities:");
    for (i, a) in embeddings.iter().enumerate() {
        let row: Vec<String> = embeddings
            .iter()
            .map(|b| format!("{:6.3}", a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>()))
            .collect();
        println!("{:>14}  {}", queries[i], row.join(" "));
    }
    Ok(())
}
