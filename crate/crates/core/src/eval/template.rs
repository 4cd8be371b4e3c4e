//! Prompt templates with fixed in-context examples.

use crate::error::{Error, Result};
use crate::eval::extract::match_label;

#[derive(Debug, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub labels: &'static [&'static str],
    /// Instruction and examples; the query is appended after a blank line.
    pub body: &'static str,
    /// Field name in front of the query text ("Tweet", "Notícia").
    pub field: &'static str,
    /// False for templates written for this tool rather than taken from a
    /// published prompt.
    pub canonical: bool,
}

const TWEETSENT3_BODY: &str = "Você é um assistente de perguntas e respostas. Cada contexto passado será um tweet que está vinculado a um sentimento correspondente. No total, são 3 tipos de sentimentos: Positivo, Neutro e Negativo. O seu objetivo é dado um tweet, encontrar qual é o seu sentimento correspondente. Abaixo estão alguns exemplos:\n\n\
Tweet: :D que lindo dia ! Resposta: Positivo\n\n\
Tweet: eu tô tão cansado :( Resposta: Negativo\n\n\
Tweet: Microsoft lança pesquisa resultado de pesquisa com o Ibope sobre uso da #tecnologia no #trabalho no #Brasil @MicrosoftBr @NielsenIBOPE Resposta: Neutro\n\n\
Considere que tweets com chamadas de notícias com sempre neutros, independente do seu conteúdo, a não ser que o autor emita sua opinião sobre o acontecimento relatado. Dado o contexto, responda em qual dos 3 tipos de sentimentos o tweet a seguir se enquadra.";

const AGNEWS4_BODY: &str = "Você é um assistente de perguntas e respostas. Cada contexto passado será uma notícia que está vinculada a uma categoria correspondente. No total, são 4 categorias: Mundo, Esportes, Negócios e Tecnologia. O seu objetivo é dado uma notícia, encontrar qual é a sua categoria correspondente. Abaixo estão alguns exemplos:\n\n\
Notícia: Até o final do ano, a gigante da computação planeja ter seu maior número de funcionários desde 1991. Resposta: Tecnologia\n\n\
Notícia: Michael Phelps ganhou a medalha de ouro no 400 Medley individual e estabeleceu um recorde mundial em um tempo de 4 minutos 8,26 segundos. Resposta: Esportes\n\n\
Notícia: TEEHRAN (Reuters) - Um oficial militar iraniano disse domingo a Israel e os Estados Unidos não ousariam atacar o Irã, pois poderia revidar em qualquer lugar de Israel com seus mais recentes mísseis, informou as agências de notícias. Resposta: Mundo\n\n\
Notícia: Reuters-Os varejistas de vestuário esperam que suas modas de volta às aulas façam a nota entre os adolescentes conscientes do estilo e os jovens adultos neste outono, mas pode ser uma venda difícil, com os alunos e os pais mantendo um mais apertado. carteiras. Resposta: Negócios\n\n\
Dado o contexto, responda em qual das 4 categorias a notícia a seguir se enquadra.";

const TWEETSENT2_BODY: &str = "Você é um assistente de perguntas e respostas. Cada contexto passado será um tweet que está vinculado a um sentimento correspondente. No total, são 2 tipos de sentimentos: Positivo e Negativo. O seu objetivo é dado um tweet, encontrar qual é o seu sentimento correspondente. Abaixo estão alguns exemplos:\n\n\
Tweet: :D que lindo dia ! Resposta: Positivo\n\n\
Tweet: eu tô tão cansado :( Resposta: Negativo\n\n\
Dado o contexto, responda em qual dos 2 tipos de sentimentos o tweet a seguir se enquadra.";

const FAKERECOGNA2_BODY: &str = "Você é um assistente de perguntas e respostas. Cada contexto passado será uma notícia que está vinculada a uma classe correspondente. No total, são 2 classes: Verdadeira e Falsa. O seu objetivo é dado uma notícia, encontrar qual é a sua classe correspondente. Abaixo estão alguns exemplos:\n\n\
Notícia: O Banco Central manteve a taxa básica de juros inalterada na reunião desta quarta-feira. Resposta: Verdadeira\n\n\
Notícia: Cientistas confirmam que beber água gelada após as refeições transforma gordura em pedra. Resposta: Falsa\n\n\
Dado o contexto, responda em qual das 2 classes a notícia a seguir se enquadra.";

pub const TEMPLATES: &[Template] = &[
    Template {
        id: "tweetsent3",
        labels: &["Positivo", "Neutro", "Negativo"],
        body: TWEETSENT3_BODY,
        field: "Tweet",
        canonical: true,
    },
    Template {
        id: "agnews4",
        labels: &["Mundo", "Esportes", "Negócios", "Tecnologia"],
        body: AGNEWS4_BODY,
        field: "Notícia",
        canonical: true,
    },
    Template {
        id: "tweetsent2",
        labels: &["Positivo", "Negativo"],
        body: TWEETSENT2_BODY,
        field: "Tweet",
        canonical: false,
    },
    Template {
        id: "fakerecogna2",
        labels: &["Verdadeira", "Falsa"],
        body: FAKERECOGNA2_BODY,
        field: "Notícia",
        canonical: false,
    },
];

pub fn template(id: &str) -> Result<&'static Template> {
    TEMPLATES.iter().find(|t| t.id == id).ok_or_else(|| {
        let known: Vec<_> = TEMPLATES.iter().map(|t| t.id).collect();
        Error::Usage(format!(
            "unknown template {id:?}; known: {}",
            known.join(", ")
        ))
    })
}

/// What to ask and how to read the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub template: &'static Template,
    /// Class order used by the confusion matrix.
    pub labels: Vec<String>,
    pub max_new_tokens: usize,
    /// Match labels without regard to accents.
    pub fold_accents: bool,
}

impl TaskSpec {
    pub fn new(template_id: &str) -> Result<TaskSpec> {
        let template = template(template_id)?;
        Ok(TaskSpec {
            template,
            labels: template.labels.iter().map(|s| s.to_string()).collect(),
            max_new_tokens: 8,
            fold_accents: false,
        })
    }

    /// Reorders the classes; the set must equal the template's.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<TaskSpec> {
        crate::eval::dataset::validate_labels(&labels)?;
        let own: Vec<String> = self.template.labels.iter().map(|s| s.to_string()).collect();
        let same = labels.len() == own.len()
            && labels.iter().all(|l| match_label(l, &own, false).is_some());
        if !same {
            return Err(Error::Usage(format!(
                "labels {labels:?} do not match template {} classes {own:?}",
                self.template.id
            )));
        }
        self.labels = labels
            .iter()
            .map(|l| own[match_label(l, &own, false).expect("checked above")].clone())
            .collect();
        Ok(self)
    }
}

/// Template body, then the query in the same shape as the examples, ending
/// where the model should write the class.
pub fn render_prompt(spec: &TaskSpec, text: &str) -> String {
    let t = spec.template;
    format!("{}\n\n{}: {} Resposta:", t.body, t.field, text)
}
